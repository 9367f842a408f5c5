"""Experiment runners producing the tables emitted by the command line.

Every runner takes an :class:`ExperimentConfig` and returns plain rows, so
the same code backs the CLI, the demos and the acceptance suite. Tables
average over ``cfg.seeds()``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, Res
from .data import gen_dataset
from .federated import ClientSpec, RoundLog, run_rounds, write_round_log
from .losses import LossCoeffs
from .metrics import evaluate, eval_sweep
from .model import ModelConfig, ModelParams, build_linear_model, export_embeddings
from . import theory as th

log = logging.getLogger(__name__)

DRIFT_COLUMNS = ["res1", "res2", "res3", "low_pck"]
COMPARE_COLUMNS = ["inference_res", "base_fedavg", "base_fedprox", "raf_fedavg", "raf_fedprox"]
INTERP_COLUMNS = ["method", "inference_res", "pck"]
SCALING_COLUMNS = ["n_low_clients", "low_res", "low_pck", "high_res", "high_pck"]
GAP_COLUMNS = ["round", "gap", "step"]

# stream tags keep every random draw independent of the others
_TAG_CLIENT, _TAG_EVAL, _TAG_INIT, _TAG_THEORY, _TAG_EMBED = 1, 2, 3, 4, 5


def derive_seed(seed: int, tag: int, index: int = 0) -> int:
    return int(np.random.SeedSequence([seed, tag, index]).generate_state(1)[0])


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    return ModelConfig(cfg.model_patch, cfg.model_dim, cfg.model_blocks, cfg.model_keypoints)


def pyramid_for(native: Res, family: Sequence[Res], raf: bool) -> tuple[Res, ...]:
    """``native`` followed, for RAF clients, by every smaller family member."""
    if not raf:
        return (tuple(native),)
    lower = [tuple(r) for r in family if r[0] < native[0] and r[1] < native[1]]
    return (tuple(native), *sorted(lower, reverse=True))


def client_specs(cfg: ExperimentConfig, natives: Sequence[Res], raf: bool, seed: int) -> list[ClientSpec]:
    coeffs = LossCoeffs(cfg.loss_alpha, cfg.loss_gamma)
    n = cfg.data_samples
    specs = []
    for c, nat in enumerate(natives):
        samples = gen_dataset(
            n, *nat, cfg.model_keypoints, derive_seed(seed, _TAG_CLIENT, c), patch=cfg.model_patch, start_id=c * n
        )
        specs.append(
            ClientSpec(
                client_id=c,
                resolutions=pyramid_for(nat, cfg.data_family, raf),
                samples=samples,
                coeffs=coeffs,
                epochs=cfg.train_epochs,
                batch_size=cfg.train_batch_size,
                lr=cfg.train_lr,
                optimizer=cfg.train_optimizer,
                seed=c,
            )
        )
    return specs


def eval_set(cfg: ExperimentConfig, seed: int) -> list:
    return gen_dataset(
        cfg.data_eval_samples,
        *cfg.data_eval_native,
        cfg.model_keypoints,
        derive_seed(seed, _TAG_EVAL),
        patch=cfg.model_patch,
        start_id=10**6,
    )


@dataclass
class TrainedModel:
    params: ModelParams
    logs: list[RoundLog]
    seed: int
    label: str


def train(
    cfg: ExperimentConfig,
    natives: Sequence[Res],
    raf: bool,
    aggregator: str,
    seed: int,
    workers: int = 1,
    label: str = "",
) -> TrainedModel:
    specs = client_specs(cfg, natives, raf, seed)
    init = ModelParams.init(model_config(cfg), derive_seed(seed, _TAG_INIT))
    params, logs = run_rounds(
        specs,
        cfg.train_rounds,
        seed,
        aggregator,
        model_config(cfg),
        mu=cfg.loss_mu,
        workers=workers,
        method=cfg.train_method,
        init_params=init,
    )
    log.info("trained %s seed=%d", label or aggregator, seed)
    return TrainedModel(params, logs, seed, label)


# ------------------------------------------------------------------ tables


def drift_table(cfg: ExperimentConfig, workers: int = 1, models: list | None = None) -> list[list]:
    """One base (no distillation) FedAvg model per triplet, scored at the
    triplet's lowest resolution."""
    rows = []
    for trip in cfg.drift_triplets:
        low = min(trip)
        scores = []
        for seed in cfg.seeds():
            label = "drift_" + "_".join(f"{h}x{w}" for h, w in trip)
            m = train(cfg, trip, False, "fedavg", seed, workers, label)
            if models is not None:
                models.append(m)
            scores.append(evaluate(m.params, eval_set(cfg, seed), low, tau=cfg.eval_tau, method=cfg.train_method).pck)
        rows.append([*trip, float(np.mean(scores))])
    return rows


COMPARE_VARIANTS = (("base_fedavg", False, "fedavg"), ("base_fedprox", False, "fedprox"),
                    ("raf_fedavg", True, "fedavg"), ("raf_fedprox", True, "fedprox"))  # fmt: skip


def compare_table(
    cfg: ExperimentConfig, workers: int = 1, models: dict | None = None
) -> list[list]:
    """Base and RAF under FedAvg and FedProx, swept over the eval resolutions.

    Client ``c`` holds native data at ``data.family[c]``. ``models`` (if
    given) collects the trained models keyed by ``(variant, seed)``.
    """
    sums = {name: np.zeros(len(cfg.eval_resolutions)) for name, _, _ in COMPARE_VARIANTS}
    for seed in cfg.seeds():
        ev = eval_set(cfg, seed)
        for name, raf, agg in COMPARE_VARIANTS:
            m = train(cfg, cfg.data_family, raf, agg, seed, workers, name)
            if models is not None:
                models[(name, seed)] = m
            res = eval_sweep(m.params, ev, cfg.eval_resolutions, cfg.train_method, cfg.eval_tau)
            sums[name] += [r.pck for r in res]
    k = len(cfg.seeds())
    return [
        [r, *(float(sums[name][i] / k) for name, _, _ in COMPARE_VARIANTS)]
        for i, r in enumerate(cfg.eval_resolutions)
    ]


def interp_table(cfg: ExperimentConfig, workers: int = 1, params_by_seed: dict | None = None) -> list[list]:
    """Inference on ``interp.source`` images, directly and after upscaling
    to each target grid with each interpolation method, for the RAF
    (FedAvg) model."""
    rows: dict[tuple, list[float]] = {}
    for seed in cfg.seeds():
        params = (params_by_seed or {}).get(seed)
        if params is None:
            params = train(cfg, cfg.data_family, True, "fedavg", seed, workers, "raf_fedavg").params
        ev = eval_set(cfg, seed)
        src = cfg.interp_source
        direct = evaluate(params, ev, src, tau=cfg.eval_tau, method=cfg.train_method)
        rows.setdefault(("direct", src), []).append(direct.pck)
        for method in cfg.interp_methods:
            for tgt in cfg.interp_targets:
                r = evaluate(
                    params, ev, src, tau=cfg.eval_tau, method=cfg.train_method,
                    infer_resolution=tgt, infer_method=method,
                )  # fmt: skip
                rows.setdefault((method, tgt), []).append(r.pck)
    return [[method, res, float(np.mean(v))] for (method, res), v in rows.items()]


def scaling_table(cfg: ExperimentConfig, workers: int = 1) -> list[list]:
    """One high-resolution client joined by ``0..scaling.max_low`` low-resolution
    clients. Zero is the client training alone without distillation;
    federated runs use RAF on every client."""
    rows = []
    for n_low in range(cfg.scaling_max_low + 1):
        natives = [cfg.scaling_high] + [cfg.scaling_low] * n_low
        lo, hi = [], []
        for seed in cfg.seeds():
            m = train(cfg, natives, n_low > 0, "fedavg", seed, workers, f"scaling_{n_low}")
            ev = eval_set(cfg, seed)
            lo.append(evaluate(m.params, ev, cfg.scaling_low, tau=cfg.eval_tau, method=cfg.train_method).pck)
            hi.append(evaluate(m.params, ev, cfg.scaling_high, tau=cfg.eval_tau, method=cfg.train_method).pck)
        rows.append([n_low, cfg.scaling_low, float(np.mean(lo)), cfg.scaling_high, float(np.mean(hi))])
    return rows


def embedding_rows(cfg: ExperimentConfig, workers: int = 1) -> tuple[list[str], list[list]]:
    seed = cfg.seed
    variants = [("base", False)] + ([("raf", True)] if cfg.embed_raf else [])
    samples = gen_dataset(
        cfg.embed_samples, *cfg.data_eval_native, cfg.model_keypoints, derive_seed(seed, _TAG_EMBED),
        patch=cfg.model_patch,
    )  # fmt: skip
    rows = []
    for name, raf in variants:
        m = train(cfg, cfg.data_family, raf, "fedavg", seed, workers, name)
        for res, sid, vec in export_embeddings(m.params, samples, cfg.embed_resolutions, cfg.train_method):
            rows.append([name, res, sid, *(float(x) for x in vec)])
    columns = ["model", "resolution", "sample_id", *(f"f{i}" for i in range(cfg.model_dim))]
    return columns, rows


# ------------------------------------------------------------------ theory


def theory_instance(cfg: ExperimentConfig, index: int, m_phi: float | None = None):
    """Frozen-feature instance: client ``c`` holds ``theory.samples`` scenes at
    ``data.family[c]`` with the RAF pyramid below it."""
    seed = derive_seed(cfg.seed, _TAG_THEORY, index)
    fam = cfg.data_family
    datasets, pyramids = [], []
    for c in range(cfg.theory_clients):
        nat = fam[c % len(fam)]
        datasets.append(gen_dataset(cfg.theory_samples, *nat, cfg.model_keypoints, seed + c, patch=cfg.model_patch))
        pyramids.append(pyramid_for(nat, fam, True))
    return build_linear_model(
        datasets, seed, cfg.theory_m_phi if m_phi is None else m_phi, pyramids, model_config(cfg), cfg.train_method
    )


def theory_report(cfg: ExperimentConfig) -> tuple[dict, list[list]]:
    """Constants and bound checks on ``theory.instances`` instances,
    local-equivalence residuals on ``theory.equivalence_instances``, and the
    FedAvg gap curve on the first instance."""
    coeffs = LossCoeffs(cfg.loss_alpha, cfg.loss_gamma)
    rng = np.random.default_rng(derive_seed(cfg.seed, _TAG_THEORY, 10**6))
    instances, equivalence, lms = [], [], []
    for i in range(max(cfg.theory_instances, cfg.theory_equivalence_instances)):
        lm = theory_instance(cfg, i)
        lms.append(lm)
        if i < cfg.theory_equivalence_instances:
            w_t = rng.normal(size=(lm.dim, lm.n_keypoints))
            resid = [th.check_local_equivalence(lm, w_t, coeffs, k) for k in range(lm.n_clients)]
            zero = LossCoeffs(0.0, cfg.loss_gamma)
            resid0 = [th.check_local_equivalence(lm, w_t, zero, k) for k in range(lm.n_clients)]
            equivalence.append(
                {
                    "instance": i,
                    "value_residual": [r[0] for r in resid],
                    "grad_residual": [r[1] for r in resid],
                    "alpha0_value_residual": [r[0] for r in resid0],
                    "alpha0_grad_residual": [r[1] for r in resid0],
                }
            )
        if i < cfg.theory_instances:
            consts = th.compute_constants(lm, coeffs, cfg.theory_radius)
            seed = derive_seed(cfg.seed, _TAG_THEORY, 1000 + i)
            bounds = th.verify_bounds(lm, consts, cfg.theory_trials, seed=seed)
            instances.append(
                {
                    "instance": i,
                    "constants": consts.to_dict(),
                    "bounds": {k: v for k, v in bounds.items() if k != "clients"},
                    "clients": bounds["clients"],
                }
            )

    lm = lms[0]
    consts = th.compute_constants(lm, coeffs, cfg.theory_radius)
    curve = th.convergence_experiment(
        lm, cfg.theory_rounds, consts, cfg.theory_local_steps, seed=derive_seed(cfg.seed, _TAG_THEORY, 2000),
        repeats=cfg.theory_repeats,
    )  # fmt: skip
    rate = rate_summary(curve)
    spot = {
        "r1": th.lipschitz_bound(consts.M_phi, consts.M_U, cfg.loss_alpha, cfg.loss_gamma, 1),
        "r1_expected": 2 * consts.M_phi**2 + cfg.loss_gamma,
        "unit": th.lipschitz_bound(1.0, 1.0, 1.0, 0.01, 3),
    }
    report = {
        "coeffs": {"alpha": cfg.loss_alpha, "gamma": cfg.loss_gamma},
        "lipschitz_spot_values": spot,
        "instances": instances,
        "equivalence": equivalence,
        "alpha0_residuals_zero": all(
            v == 0.0 for e in equivalence for v in (*e["alpha0_value_residual"], *e["alpha0_grad_residual"])
        ),
        "convergence": {"constants": consts.to_dict(), "local_steps": cfg.theory_local_steps, **rate},
        "all_bounds_ok": all(
            inst["bounds"][k] for inst in instances for k in ("smooth_ok", "strongly_convex_ok", "grad_bound_ok")
        ),
    }
    steps = [*curve.step, float("nan")]  # no step is taken after the last round
    gap_rows = [[int(t), float(g), float(s)] for t, g, s in zip(curve.rounds, curve.gap, steps)]
    return report, gap_rows


def rate_summary(curve: th.GapCurve, lo: int = 50, hi: int = 500) -> dict:
    hi = min(hi, len(curve.gap) - 1)
    t = curve.rounds[lo : hi + 1]
    g = curve.gap[lo : hi + 1]
    c, r2 = th.fit_inverse_t(t, g)
    s, p = th.mann_kendall(g * t)
    return {
        "window": [lo, hi],
        "fit_c": c,
        "fit_r2": r2,
        "gap_ratio": float(curve.gap[hi] / curve.gap[lo]) if curve.gap[lo] > 0 else 0.0,
        "gap_t_mann_kendall_s": s,
        "gap_t_mann_kendall_p": p,
        "gap_t_upward_trend": bool(s > 0 and p <= 0.05),
    }


def write_logs(models: Sequence[TrainedModel], directory: Path, header: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for m in models:
        write_round_log(m.logs, directory / f"{m.label}_seed{m.seed}.csv", header)
