"""Federated rounds: broadcast, local multi-resolution training, aggregation."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import SyntheticSample, build_pyramid, check_resolutions
from .losses import LossCoeffs, mrkd_loss, task_loss, total_loss
from .model import ModelConfig, ModelParams, heatmap_node, param_nodes
from .tensor import build_upsample_op

log = logging.getLogger(__name__)

ROUND_LOG_COLUMNS = ["round", "client_id", "loss_task", "loss_kd", "loss_reg", "loss_prox", "grad_norm"]


class NumericalError(FloatingPointError):
    """Raised on the first non-finite loss or parameter."""


@dataclass(frozen=True)
class ClientSpec:
    client_id: int
    resolutions: tuple[tuple[int, int], ...]
    samples: tuple[SyntheticSample, ...]
    coeffs: LossCoeffs = LossCoeffs()
    epochs: int = 1
    batch_size: int = 32
    lr: float = 0.05
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(tuple(r) for r in self.resolutions))
        object.__setattr__(self, "samples", tuple(self.samples))
        check_resolutions(self.resolutions)
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def n_res(self) -> int:
        return len(self.resolutions)


@dataclass
class ClientState:
    spec: ClientSpec
    params: ModelParams
    levels: list[np.ndarray]  # per level: (n, h_i, w_i, C)
    targets: np.ndarray  # (n, h_0/P, w_0/P, K)
    ops: list  # ops[i] lifts level i heatmaps to level i-1; ops[0] is None

    @classmethod
    def build(cls, spec: ClientSpec, params: ModelParams, patch: int, method: str = "bilinear") -> "ClientState":
        if not spec.samples:
            raise ValueError(f"client {spec.client_id} has an empty shard")
        check_resolutions(spec.resolutions, patch)
        native = spec.resolutions[0]
        for s in spec.samples:
            if s.image.shape[:2] != native:
                raise ValueError(f"client {spec.client_id}: sample {s.sample_id} is {s.image.shape[:2]}, expected {native}")
        pyramids = [build_pyramid(s.image, spec.resolutions, patch, method) for s in spec.samples]
        levels = [np.stack([p[i] for p in pyramids]) for i in range(spec.n_res)]
        targets = np.stack([s.target for s in spec.samples])
        grids = [(h // patch, w // patch) for (h, w) in spec.resolutions]
        ops = [None] + [build_upsample_op(*grids[i], *grids[i - 1]) for i in range(1, len(grids))]
        return cls(spec, params, levels, targets, ops)


@dataclass
class RoundLog:
    round: int
    client_id: int
    loss_task: float
    loss_kd: float
    loss_reg: float
    loss_prox: float
    grad_norm: float
    global_norm: float = float("nan")
    eval: dict = field(default_factory=dict)

    def row(self) -> list:
        return [self.round, self.client_id, self.loss_task, self.loss_kd, self.loss_reg, self.loss_prox, self.grad_norm]


def batch_loss(
    params: ModelParams,
    config: ModelConfig,
    levels: Sequence[np.ndarray],
    targets: np.ndarray,
    ops: Sequence,
    coeffs: LossCoeffs,
    global_params: ModelParams | None = None,
    teachers: Sequence[np.ndarray] | None = None,
):
    """Build the local objective for one minibatch; returns ``(tape, nodes, parts)``.

    ``teachers`` optionally freezes the distillation teachers to constant
    arrays (see :func:`mrkd_loss`).
    """
    tape = ad.Tape()
    p = param_nodes(tape, params)
    preds = [heatmap_node(tape.constant(x), p, config) for x in levels]
    n = targets.shape[0]
    task = task_loss(preds[0], tape.constant(targets), n)
    kd = mrkd_loss(preds, ops, n, teachers) if len(preds) > 1 else None
    anchor = [global_params[name] for name in params.names] if global_params is not None else None
    parts = total_loss(task, kd, list(p.values()), coeffs, anchor)
    return tape, p, parts


class _AdamW:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.m, self.v, self.t = {}, {}, 0

    def step(self, tensors: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(name, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            w = tensors[name]
            if self.wd:
                w = w * (1 - self.lr * self.wd)
            tensors[name] = w - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def local_train(
    state: ClientState, global_params: ModelParams, seed: int, config: ModelConfig | None = None
) -> tuple[ModelParams, list[dict]]:
    """Run ``E`` epochs of minibatch descent on the local objective.

    The proximal anchor (when ``mu_prox > 0``) is ``global_params``. Returns
    the updated parameters and one trace entry per step.
    """
    spec = state.spec
    if spec.epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {spec.epochs}")
    n = state.targets.shape[0]
    if n == 0:
        raise ValueError(f"client {spec.client_id} has an empty shard")
    config = config or global_params.config
    params = global_params.copy()
    anchor = global_params if spec.coeffs.mu_prox > 0 else None
    rng = np.random.default_rng(seed)
    opt = _AdamW(spec.lr) if spec.optimizer == "adamw" else None
    trace = []
    for epoch in range(spec.epochs):
        order = rng.permutation(n)
        for start in range(0, n, spec.batch_size):
            idx = np.sort(order[start : start + spec.batch_size])
            levels = [lv[idx] for lv in state.levels]
            tape, _, parts = batch_loss(params, config, levels, state.targets[idx], state.ops, spec.coeffs, anchor)
            grads = ad.backward(tape, parts.total)
            values = parts.values()
            tape.release()
            if not np.isfinite(values["total"]):
                raise NumericalError(f"client {spec.client_id}: non-finite loss at epoch {epoch}")
            gnorm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
            if opt is None:
                for name, g in grads.items():
                    params.tensors[name] = params.tensors[name] - spec.lr * g
            else:
                opt.step(params.tensors, grads)
            trace.append({"epoch": epoch, **values, "grad_norm": gnorm})
    return params, trace


def aggregate_fedavg(client_params: Sequence[ModelParams]) -> ModelParams:
    """Unweighted elementwise mean.

    Values are sorted per element before summing, so the result is bitwise
    independent of client order.
    """
    if not client_params:
        raise ValueError("need at least one client")
    first = client_params[0]
    for p in client_params[1:]:
        first.check_compatible(p)
    out = {}
    for name in first.names:
        stack = np.sort(np.stack([p[name] for p in client_params]), axis=0)
        acc = stack[0].copy()
        for row in stack[1:]:
            acc += row
        out[name] = acc / len(client_params)
    return ModelParams(out, first.config)


def _client_seed(run_seed: int, client_seed: int, round_: int) -> int:
    return int(np.random.SeedSequence([run_seed, client_seed, round_]).generate_state(1)[0])


def _train_job(args):
    state, global_params, seed, config = args
    return local_train(state, global_params, seed, config)


def _summarise(t: int, cid: int, trace: list[dict], epochs: int) -> RoundLog:
    last = [e for e in trace if e["epoch"] == epochs - 1]
    mean = lambda key: float(np.mean([e[key] for e in last]))
    return RoundLog(t, cid, mean("task"), mean("kd"), mean("reg"), mean("prox"), last[-1]["grad_norm"])


def run_rounds(
    specs: Sequence[ClientSpec],
    T: int,
    init_seed: int,
    aggregator: str = "fedavg",
    config: ModelConfig | None = None,
    *,
    mu: float = 0.01,
    workers: int = 1,
    method: str = "bilinear",
    init_params: ModelParams | None = None,
    on_round: Callable[[int, ModelParams], dict] | None = None,
) -> tuple[ModelParams, list[RoundLog]]:
    """Run ``T`` rounds of broadcast, local training and averaging.

    ``aggregator="fedprox"`` sets ``mu_prox = mu`` on every client, anchored
    at the broadcast model; ``"fedavg"`` forces ``mu_prox = 0``. Clients are
    aggregated in ``client_id`` order, so results do not depend on
    ``workers``.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if aggregator not in ("fedavg", "fedprox"):
        raise ValueError(f"unknown aggregator {aggregator!r}")
    config = config or ModelConfig()
    mu_prox = mu if aggregator == "fedprox" else 0.0
    specs = sorted(specs, key=lambda s: s.client_id)
    if len({s.client_id for s in specs}) != len(specs):
        raise ValueError("client ids must be unique")
    specs = [replace(s, coeffs=replace(s.coeffs, mu_prox=mu_prox)) for s in specs]
    global_params = init_params.copy() if init_params is not None else ModelParams.init(config, init_seed)
    states = [ClientState.build(s, global_params, config.patch, method) for s in specs]

    logs: list[RoundLog] = []
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(T):
            jobs = [(st, global_params, _client_seed(init_seed, st.spec.seed, t), config) for st in states]
            results = list(pool.map(_train_job, jobs)) if pool else [_train_job(j) for j in jobs]
            global_params = aggregate_fedavg([p for p, _ in results])
            if not np.all(np.isfinite(global_params.flatten())):
                raise NumericalError(f"non-finite global parameters after round {t}")
            gnorm = global_params.norm()
            extra = on_round(t, global_params) if on_round else {}
            for st, (_, trace) in zip(states, results):
                entry = _summarise(t, st.spec.client_id, trace, st.spec.epochs)
                entry.global_norm = gnorm
                entry.eval = extra
                logs.append(entry)
            log.debug("round %d: task=%s", t, [round(l.loss_task, 4) for l in logs[-len(states):]])
    finally:
        if pool:
            pool.shutdown()
    return global_params, logs


def write_round_log(logs: Sequence[RoundLog], path, header: str | None = None) -> None:
    from .report import fmt

    with open(path, "w", newline="", encoding="utf-8") as f:
        if header:
            f.write(header + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ROUND_LOG_COLUMNS)
        for entry in logs:
            w.writerow([fmt(v) for v in entry.row()])
