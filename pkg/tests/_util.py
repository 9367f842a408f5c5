"""Shared fixtures for the gradient and training tests."""

from __future__ import annotations

import numpy as np

from rafsim import autodiff as ad
from rafsim.data import build_pyramid
from rafsim.federated import batch_loss
from rafsim.model import ModelConfig, ModelParams
from rafsim.tensor import build_upsample_op

SMALL = ModelConfig(patch=4, dim=8, blocks=2, keypoints=3)
SMALL_LEVELS = ((16, 12), (12, 8), (8, 4))


def random_batch(rng, config=SMALL, resolutions=SMALL_LEVELS, n=2):
    """Random images, their pyramids, random targets in [0, 1] and the level operators."""
    imgs = rng.normal(size=(n, *resolutions[0], config.channels))
    pyr = [build_pyramid(im, resolutions, config.patch) for im in imgs]
    levels = [np.stack([p[i] for p in pyr]) for i in range(len(resolutions))]
    grids = [(h // config.patch, w // config.patch) for h, w in resolutions]
    targets = rng.uniform(size=(n, *grids[0], config.keypoints))
    ops = [None] + [build_upsample_op(*grids[i], *grids[i - 1]) for i in range(1, len(grids))]
    return levels, targets, ops


def teacher_values(params, config, levels, targets, ops, coeffs, anchor=None):
    """Heatmaps of every non-lowest level at ``params``; the frozen teachers."""
    tape, _, parts = batch_loss(params, config, levels, targets, ops, coeffs, anchor)
    heat = [n.value for n in tape.nodes if n.op == "stop_gradient"]
    return heat


def objective(params, config, levels, targets, ops, coeffs, anchor=None, teachers=None) -> float:
    _, _, parts = batch_loss(params, config, levels, targets, ops, coeffs, anchor, teachers)
    return float(parts.total.value)


def central_diff(f, params: ModelParams, eps: float = 1e-5) -> np.ndarray:
    x = params.flatten()
    g = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(params.unflatten(xp)) - f(params.unflatten(xm))) / (2 * eps)
    return g


def flat_grads(grads: dict, params: ModelParams) -> np.ndarray:
    return np.concatenate([grads[name].ravel() for name in params.names])


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def op_fd(build, arrays, eps=1e-6):
    """Gradient of ``sum(build(*nodes) * probe)`` by autodiff and by central differences."""
    rng = np.random.default_rng(12345)
    tape = ad.Tape()
    nodes = [tape.param(a, f"x{i}") for i, a in enumerate(arrays)]
    out = build(*nodes)
    probe = np.asarray(rng.normal(size=out.shape))
    grads = ad.backward(tape, _dot(out, probe))

    def value(arrs):
        t = ad.Tape()
        return float(np.sum(build(*[t.param(a) for a in arrs]).value * probe))

    fds = []
    for i, a in enumerate(arrays):
        g = np.empty_like(a, dtype=float)
        for idx in np.ndindex(a.shape):
            ap, am = [x.copy() for x in arrays], [x.copy() for x in arrays]
            ap[i][idx] += eps
            am[i][idx] -= eps
            g[idx] = (value(ap) - value(am)) / (2 * eps)
        fds.append(g)
    return [grads[f"x{i}"] for i in range(len(arrays))], fds


def _dot(node, probe):
    """``sum(node * probe)`` expressed with tape ops: ||x + p/2||^2 - ||x - p/2||^2 = 2 x.p"""
    tape = node.tape
    half = tape.constant(probe / 2)
    a = ad.sum_squares(ad.add(node, half))
    b = ad.sum_squares(ad.sub(node, half))
    return ad.scale(ad.total([a, ad.scale(b, -1.0)]), 0.5)
