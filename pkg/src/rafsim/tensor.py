"""Image resampling and the fixed bilinear upsampling operator.

Images are ``float64`` arrays shaped ``(H, W, C)``. Every resize uses
half-pixel centres (``align_corners=False``) with clamped borders.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

METHODS = ("nearest", "bilinear", "bicubic", "area")


def _check_extent(*extents: int) -> None:
    for e in extents:
        if int(e) < 1:
            raise ValueError(f"extents must be >= 1, got {extents}")


def _bilinear_1d(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(i0, i1, frac)`` for one axis so that
    ``out[d] = (1 - frac[d]) * in[i0[d]] + frac[d] * in[i1[d]]``."""
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, pos - i0


def bilinear_taps(src_h: int, src_w: int, dst_h: int, dst_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Four-tap bilinear weights over flattened row-major pixels.

    Returns ``(index, weight)``, both ``(dst_h * dst_w, 4)``. Tap order is
    (top-left, top-right, bottom-left, bottom-right).
    """
    _check_extent(src_h, src_w, dst_h, dst_w)
    y0, y1, fy = _bilinear_1d(src_h, dst_h)
    x0, x1, fx = _bilinear_1d(src_w, dst_w)
    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    FY, FX = np.meshgrid(fy, fx, indexing="ij")
    index = np.stack([Y0 * src_w + X0, Y0 * src_w + X1, Y1 * src_w + X0, Y1 * src_w + X1], axis=-1)
    weight = np.stack([(1 - FY) * (1 - FX), (1 - FY) * FX, FY * (1 - FX), FY * FX], axis=-1)
    return index.reshape(-1, 4), weight.reshape(-1, 4)


def apply_taps(index: np.ndarray, weight: np.ndarray, flat: np.ndarray) -> np.ndarray:
    """Gather-and-sum over the pixel axis of ``flat``.

    ``flat`` is ``(..., P, C)``. Taps are summed in a fixed order, so any two
    callers that share taps produce bitwise-identical results.
    """
    out = weight[:, 0, None] * flat[..., index[:, 0], :]
    for t in range(1, index.shape[1]):
        out = out + weight[:, t, None] * flat[..., index[:, t], :]
    return out


def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    return np.where(
        t <= 1,
        (a + 2) * t3 - (a + 3) * t2 + 1,
        np.where(t < 2, a * t3 - 5 * a * t2 + 8 * a * t - 4 * a, 0.0),
    )


def _axis_matrix(src: int, dst: int, method: str) -> np.ndarray:
    """Dense ``(dst, src)`` resampling matrix for one axis."""
    m = np.zeros((dst, src))
    rows = np.arange(dst)
    if method == "nearest":
        idx = np.minimum(np.floor((rows + 0.5) * (src / dst)).astype(np.int64), src - 1)
        m[rows, idx] = 1.0
    elif method == "bilinear":
        i0, i1, f = _bilinear_1d(src, dst)
        np.add.at(m, (rows, i0), 1 - f)
        np.add.at(m, (rows, i1), f)
    elif method == "bicubic":
        pos = (rows + 0.5) * (src / dst) - 0.5
        base = np.floor(pos).astype(np.int64)
        for off in (-1, 0, 1, 2):
            tap = base + off
            np.add.at(m, (rows, np.clip(tap, 0, src - 1)), _cubic(pos - tap))
    elif method == "area":
        # Overlap of each output box [d*s, (d+1)*s) with input pixels [p, p+1).
        scale = src / dst
        lo = rows * scale
        hi = lo + scale
        p = np.arange(src)
        overlap = np.clip(np.minimum(hi[:, None], p[None, :] + 1) - np.maximum(lo[:, None], p[None, :]), 0, None)
        m = overlap / overlap.sum(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return m


def resize(img: np.ndarray, dst_h: int, dst_w: int, method: str = "bilinear") -> np.ndarray:
    """Resample an ``(H, W, C)`` image to ``(dst_h, dst_w, C)``."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {img.shape}")
    h, w, c = img.shape
    _check_extent(h, w, c, dst_h, dst_w)
    if method == "bilinear":
        index, weight = bilinear_taps(h, w, dst_h, dst_w)
        return apply_taps(index, weight, img.reshape(h * w, c)).reshape(dst_h, dst_w, c)
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    my = _axis_matrix(h, dst_h, method)
    mx = _axis_matrix(w, dst_w, method)
    return np.einsum("ah,hwc,bw->abc", my, img, mx)


@dataclass(frozen=True)
class UpsampleOp:
    """Fixed bilinear map from a ``src_h x src_w`` grid to ``dst_h x dst_w``.

    Stored as four taps per output pixel; :attr:`matrix` gives the sparse
    ``(dst_h*dst_w, src_h*src_w)`` form and :meth:`dense` the dense one.
    """

    src_h: int
    src_w: int
    dst_h: int
    dst_w: int
    index: np.ndarray
    weight: np.ndarray

    @property
    def src_size(self) -> int:
        return self.src_h * self.src_w

    @property
    def dst_size(self) -> int:
        return self.dst_h * self.dst_w

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        rows = np.repeat(np.arange(self.dst_size), self.index.shape[1])
        m = sp.coo_matrix(
            (self.weight.ravel(), (rows, self.index.ravel())),
            shape=(self.dst_size, self.src_size),
        ).tocsr()
        m.sum_duplicates()
        m.eliminate_zeros()
        return m

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def spectral_norm(self) -> float:
        return float(np.linalg.norm(self.dense(), 2))


def build_upsample_op(src_h: int, src_w: int, dst_h: int, dst_w: int) -> UpsampleOp:
    _check_extent(src_h, src_w, dst_h, dst_w)
    if dst_h < src_h or dst_w < src_w:
        raise ValueError(f"upsample op cannot downscale {src_h}x{src_w} -> {dst_h}x{dst_w}")
    index, weight = bilinear_taps(src_h, src_w, dst_h, dst_w)
    return UpsampleOp(src_h, src_w, dst_h, dst_w, index, weight)


def apply_upsample(op: UpsampleOp, flat: np.ndarray) -> np.ndarray:
    """Apply ``op`` to ``(..., src_h*src_w, C)`` pixels."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.ndim < 2 or flat.shape[-2] != op.src_size:
        raise ValueError(f"expected (..., {op.src_size}, C) input, got shape {flat.shape}")
    return apply_taps(op.index, op.weight, flat)
