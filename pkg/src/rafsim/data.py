"""Synthetic keypoint scenes and multi-resolution pyramids.

A scene is defined in resolution-free coordinates (fractions of the image
height/width) and rendered analytically, with 4x4 supersampling, at
whatever pixel size is requested. Rendering the same seed at two sizes
therefore yields the same scene at two resolutions.

Keypoint coordinates are continuous ``(row, col)`` positions in native
pixels, with pixel ``i`` covering ``[i, i + 1)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import resize

SUPERSAMPLE = 4
MARGIN_PX = 2.0
TARGET_SIGMA = 1.0

# (amplitude, radius as a fraction of image height, profile)
APPEARANCES = [
    (1.0, 0.05, "gauss"),
    (-1.0, 0.05, "gauss"),
    (1.0, 0.07, "ring"),
    (0.7, 0.03, "gauss"),
    (-0.7, 0.08, "gauss"),
]


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray  # (H, W, 1)
    keypoints: np.ndarray  # (K, 2) row, col in native pixels
    target: np.ndarray  # (H/P, W/P, K)
    sample_id: int

    @property
    def resolution(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass(frozen=True)
class Scene:
    keypoints_rel: np.ndarray  # (K, 2) fractions of (H, W)
    texture: np.ndarray  # (n_waves, 4): amplitude, freq_row, freq_col, phase


def _appearance(k: int) -> tuple[float, float, str]:
    amp, rad, kind = APPEARANCES[k % len(APPEARANCES)]
    # extra keypoint types beyond the table get progressively smaller blobs
    return amp, rad * (0.85 ** (k // len(APPEARANCES))), kind


def _draw_scene(rng: np.random.Generator, k_keypoints: int, h: int, w: int) -> Scene:
    lo_r, lo_c = MARGIN_PX / h, MARGIN_PX / w
    kps = np.stack(
        [rng.uniform(lo_r, 1 - lo_r, k_keypoints), rng.uniform(lo_c, 1 - lo_c, k_keypoints)], axis=1
    )
    n_waves = 3
    texture = np.stack(
        [
            rng.uniform(0.03, 0.08, n_waves),
            rng.uniform(-5.0, 5.0, n_waves),
            rng.uniform(-4.0, 4.0, n_waves),
            rng.uniform(0.0, 2 * np.pi, n_waves),
        ],
        axis=1,
    )
    return Scene(kps, texture)


def render(scene: Scene, h: int, w: int) -> np.ndarray:
    """Render a scene to an ``(h, w, 1)`` image by box-averaging a supersampled field."""
    ss = SUPERSAMPLE
    rows = (np.arange(h * ss) + 0.5) / ss  # pixel units
    cols = (np.arange(w * ss) + 0.5) / ss
    R, C = np.meshgrid(rows, cols, indexing="ij")
    u, v = R / h, C / w
    field = np.zeros_like(R)
    for amp, fr, fc, ph in scene.texture:
        field += amp * np.sin(2 * np.pi * (fr * u + fc * v) + ph)
    for k, (kr, kc) in enumerate(scene.keypoints_rel):
        amp, rad, kind = _appearance(k)
        # distances measured in units of image height keep blobs round
        d = np.hypot(R - kr * h, C - kc * w) / h
        if kind == "ring":
            field += amp * np.exp(-((d - rad) ** 2) / (2 * (0.35 * rad) ** 2))
        else:
            field += amp * np.exp(-(d**2) / (2 * (0.5 * rad) ** 2))
    img = field.reshape(h, ss, w, ss).mean(axis=(1, 3))
    return img[..., None]


def heatmap_targets(keypoints: np.ndarray, h: int, w: int, patch: int, sigma: float = TARGET_SIGMA) -> np.ndarray:
    """Peak-normalised Gaussians on the stride-``patch`` grid, centred on the
    grid cell that contains each keypoint."""
    gh, gw = h // patch, w // patch
    rr, cc = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    out = np.empty((gh, gw, len(keypoints)))
    for k, (r, c) in enumerate(keypoints):
        cr = min(int(np.floor(r / patch)), gh - 1)
        cc0 = min(int(np.floor(c / patch)), gw - 1)
        out[..., k] = np.exp(-((rr - cr) ** 2 + (cc - cc0) ** 2) / (2 * sigma**2))
    return out


def _check_dims(h: int, w: int, patch: int) -> None:
    if h < 1 or w < 1 or h % patch or w % patch:
        raise ValueError(f"image size {h}x{w} must be positive and divisible by patch size {patch}")


def gen_dataset(
    n: int,
    h: int,
    w: int,
    k_keypoints: int,
    seed: int,
    *,
    patch: int = 4,
    start_id: int = 0,
) -> list[SyntheticSample]:
    """``n`` scenes rendered at ``h x w``; deterministic in ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if k_keypoints < 1:
        raise ValueError("k_keypoints must be >= 1")
    _check_dims(h, w, patch)
    rng = np.random.default_rng(seed)
    samples = []
    for j in range(n):
        scene = _draw_scene(rng, k_keypoints, h, w)
        kps = scene.keypoints_rel * np.array([h, w], dtype=np.float64)
        samples.append(
            SyntheticSample(
                image=render(scene, h, w),
                keypoints=kps,
                target=heatmap_targets(kps, h, w, patch),
                sample_id=start_id + j,
            )
        )
    return samples


def shard(samples: Sequence[SyntheticSample], n_clients: int) -> list[list[SyntheticSample]]:
    """Split into ``n_clients`` contiguous, disjoint, equally sized shards."""
    if n_clients < 1 or len(samples) < n_clients:
        raise ValueError(f"cannot split {len(samples)} samples into {n_clients} shards")
    per = len(samples) // n_clients
    return [list(samples[i * per : (i + 1) * per]) for i in range(n_clients)]


@dataclass(frozen=True)
class Pyramid:
    levels: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.levels[i]


def check_resolutions(resolutions: Sequence[tuple[int, int]], patch: int | None = None) -> None:
    if not resolutions:
        raise ValueError("resolution list is empty")
    for a, b in zip(resolutions, resolutions[1:]):
        if not (b[0] < a[0] and b[1] < a[1]):
            raise ValueError(f"resolutions must be strictly decreasing, got {list(resolutions)}")
    if patch is not None:
        for h, w in resolutions:
            _check_dims(h, w, patch)


def build_pyramid(
    img: np.ndarray, resolutions: Sequence[tuple[int, int]], patch: int | None = None, method: str = "bilinear"
) -> Pyramid:
    """Level 0 is ``img``; every other level is resized directly from it."""
    resolutions = [tuple(r) for r in resolutions]
    check_resolutions(resolutions, patch)
    if img.shape[:2] != resolutions[0]:
        raise ValueError(f"level 0 resolution {resolutions[0]} does not match image {img.shape[:2]}")
    levels = [np.asarray(img, dtype=np.float64)]
    levels += [resize(img, h, w, method) for (h, w) in resolutions[1:]]
    return Pyramid(tuple(levels))


def dump_dataset(samples: Sequence[SyntheticSample], directory: str | Path) -> Path:
    """JSON index plus raw little-endian float64 buffers per array."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for s in samples:
        entry = {"sample_id": s.sample_id}
        for field in ("image", "keypoints", "target"):
            arr = np.ascontiguousarray(getattr(s, field), dtype="<f8")
            fname = f"{s.sample_id:06d}.{field}.bin"
            (directory / fname).write_bytes(arr.tobytes())
            entry[field] = {"file": fname, "shape": list(arr.shape)}
        index.append(entry)
    path = directory / "index.json"
    path.write_text(json.dumps({"samples": index}, indent=1) + "\n")
    return path


def load_dataset(directory: str | Path) -> list[SyntheticSample]:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    out = []
    for e in index["samples"]:
        arrays = {
            f: np.frombuffer((directory / e[f]["file"]).read_bytes(), dtype="<f8").reshape(e[f]["shape"]).copy()
            for f in ("image", "keypoints", "target")
        }
        out.append(SyntheticSample(sample_id=e["sample_id"], **arrays))
    return out
