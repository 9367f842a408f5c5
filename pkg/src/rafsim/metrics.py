"""Heatmap decoding and keypoint accuracy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ModelParams, forward_heatmap
from .tensor import resize


@dataclass(frozen=True)
class EvalResult:
    resolution: tuple[int, int]
    pck: float
    mean_pixel_error: float
    n_samples: int


def decode(
    heatmaps: np.ndarray,
    stride: float | None = None,
    input_hw: tuple[int, int] | None = None,
    native_hw: tuple[int, int] | None = None,
) -> np.ndarray:
    """Per-channel argmax of ``(h, w, K)`` heatmaps as ``(K, 2)`` (row, col).

    Ties go to the smallest row, then the smallest column. Without
    ``stride`` the raw grid indices are returned; with it, cell centres are
    mapped to pixels of the input image and, if ``native_hw`` is given,
    rescaled from ``input_hw`` to the native frame.
    """
    heatmaps = np.asarray(heatmaps)
    if heatmaps.ndim == 2:
        heatmaps = heatmaps[..., None]
    if heatmaps.size == 0:
        raise ValueError("empty heatmap")
    h, w, k = heatmaps.shape
    flat = heatmaps.reshape(h * w, k)
    idx = np.argmax(flat, axis=0)  # first maximum in row-major order
    coords = np.stack([idx // w, idx % w], axis=1).astype(np.float64)
    if stride is None:
        return coords
    coords = (coords + 0.5) * stride
    if native_hw is not None:
        if input_hw is None:
            raise ValueError("native_hw requires input_hw")
        coords = coords * (np.asarray(native_hw, dtype=np.float64) / np.asarray(input_hw, dtype=np.float64))
    return coords


def pck(pred_kps: np.ndarray, gt_kps: np.ndarray, native_hw: tuple[int, int], tau: float = 0.1) -> float:
    """Fraction of keypoints within ``tau`` times the native image diagonal."""
    pred_kps, gt_kps = np.asarray(pred_kps, float), np.asarray(gt_kps, float)
    if pred_kps.shape != gt_kps.shape:
        raise ValueError(f"keypoint count mismatch: {pred_kps.shape} vs {gt_kps.shape}")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    thresh = tau * float(np.hypot(*native_hw))
    err = np.linalg.norm(pred_kps.reshape(-1, 2) - gt_kps.reshape(-1, 2), axis=1)
    return float(np.mean(err <= thresh))


def predict_keypoints(
    params: ModelParams,
    samples: Sequence,
    resolution: tuple[int, int],
    method: str = "bilinear",
    infer_resolution: tuple[int, int] | None = None,
    infer_method: str = "bilinear",
    batch: int = 64,
) -> np.ndarray:
    """Keypoints ``(n, K, 2)`` in each sample's native frame.

    Images are resized from native to ``resolution`` with ``method``; when
    ``infer_resolution`` is set they are then interpolated to it with
    ``infer_method`` before the forward pass.
    """
    patch = params["patch_embed.kernel"].shape[0]
    out = []
    for start in range(0, len(samples), batch):
        chunk = samples[start : start + batch]
        imgs = []
        for s in chunk:
            img = s.image if s.image.shape[:2] == tuple(resolution) else resize(s.image, *resolution, method)
            if infer_resolution is not None and tuple(infer_resolution) != tuple(resolution):
                img = resize(img, *infer_resolution, infer_method)
            imgs.append(img)
        heat = forward_heatmap(params, np.stack(imgs))
        in_hw = tuple(infer_resolution or resolution)
        for s, hm in zip(chunk, heat):
            out.append(decode(hm, patch, in_hw, s.image.shape[:2]))
    return np.stack(out)


def evaluate(params: ModelParams, samples: Sequence, resolution, tau: float = 0.1, **kw) -> EvalResult:
    if not samples:
        raise ValueError("empty evaluation set")
    preds = predict_keypoints(params, samples, resolution, **kw)
    hits, errs = [], []
    for s, p in zip(samples, preds):
        hits.append(pck(p, s.keypoints, s.image.shape[:2], tau))
        errs.append(np.linalg.norm(p - s.keypoints, axis=1).mean())
    return EvalResult(tuple(resolution), float(np.mean(hits)), float(np.mean(errs)), len(samples))


def eval_sweep(
    params: ModelParams, eval_set: Sequence, resolutions: Sequence, method: str = "bilinear", tau: float = 0.1
) -> list[EvalResult]:
    return [evaluate(params, eval_set, tuple(r), tau=tau, method=method) for r in resolutions]
