"""Local objective terms, built on an autodiff tape.

Heatmap nodes are batched ``(n, h, w, K)``. All squared-error terms are
summed over pixels and keypoints and averaged over the ``n`` samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from . import autodiff as ad
from .tensor import UpsampleOp


@dataclass(frozen=True)
class LossCoeffs:
    alpha: float = 1.0
    gamma: float = 0.01
    mu_prox: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "gamma", "mu_prox"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def task_loss(pred: ad.Node, target: ad.Node, n: int | None = None) -> ad.Node:
    n = pred.shape[0] if n is None else n
    return ad.mse(pred, target, n)


def mrkd_loss(
    preds: Sequence[ad.Node],
    ops: Sequence[UpsampleOp | None],
    n: int | None = None,
    teachers: Sequence | None = None,
) -> ad.Node | None:
    """Distillation from each level ``i-1`` (detached teacher) to the
    upsampled level ``i`` (student). ``ops[i]`` lifts level ``i`` to level
    ``i-1``; ``ops[0]`` is unused. Returns ``None`` for a single level.

    ``teachers[i-1]``, when given, replaces the detached teacher for pair
    ``(i-1, i)`` with a constant array. With the arrays taken from the same
    forward pass the loss and its gradient are unchanged; this is how the
    detachment is checked.
    """
    if len(preds) < 2:
        return None
    if len(ops) < len(preds):
        raise ValueError(f"need an upsample operator for each of the {len(preds) - 1} level pairs")
    if teachers is not None and len(teachers) != len(preds) - 1:
        raise ValueError(f"expected {len(preds) - 1} teacher arrays, got {len(teachers)}")
    n = preds[0].shape[0] if n is None else n
    tape = preds[0].tape
    terms = []
    for i in range(1, len(preds)):
        op = ops[i]
        if op is None:
            raise ValueError(f"missing upsample operator for level pair ({i - 1}, {i})")
        if teachers is None:
            teacher = ad.stop_gradient(preds[i - 1])
        else:
            teacher = tape.constant(teachers[i - 1])
        student = ad.upsample(preds[i], op)
        terms.append(ad.mse(teacher, student, n))
    return ad.total(terms)


def l2_reg(param_nodes: Sequence[ad.Node]) -> ad.Node:
    """``0.5 * ||w||^2``."""
    return ad.scale(ad.total([ad.sum_squares(p) for p in param_nodes]), 0.5)


def prox_term(param_nodes: Sequence[ad.Node], anchor: Sequence) -> ad.Node:
    """``0.5 * ||w - w_global||^2`` with the anchor held constant."""
    tape = param_nodes[0].tape
    diffs = [ad.sum_squares(ad.sub(p, tape.constant(a))) for p, a in zip(param_nodes, anchor)]
    return ad.scale(ad.total(diffs), 0.5)


@dataclass
class LossParts:
    total: ad.Node
    task: ad.Node
    kd: ad.Node | None
    reg: ad.Node
    prox: ad.Node | None

    def values(self) -> dict[str, float]:
        f = lambda n: 0.0 if n is None else float(n.value)
        return {"task": f(self.task), "kd": f(self.kd), "reg": f(self.reg), "prox": f(self.prox), "total": f(self.total)}


def total_loss(
    task: ad.Node,
    kd: ad.Node | None,
    params: Sequence[ad.Node],
    coeffs: LossCoeffs,
    global_params: Sequence | None = None,
) -> LossParts:
    """``task + alpha*kd + gamma*0.5||w||^2 + mu*0.5||w - w_global||^2``."""
    if coeffs.mu_prox > 0 and global_params is None:
        raise ValueError("mu_prox > 0 requires global parameters")
    reg = l2_reg(params)
    terms = [task, ad.scale(reg, coeffs.gamma)]
    if kd is not None:
        terms.append(ad.scale(kd, coeffs.alpha))
    prox = None
    if coeffs.mu_prox > 0:
        prox = prox_term(params, global_params)
        terms.append(ad.scale(prox, coeffs.mu_prox))
    return LossParts(ad.total(terms), task, kd, reg, prox)
