"""Flat ``section.key = value`` experiment configs.

One key per line, ``#`` starts a comment, blank lines are ignored.
Resolutions are written ``HxW`` (rows by columns) and lists are
comma-separated; drift triplets are separated by ``;`` with ``/`` between
the three members::

    seed = 3
    train.rounds = 50
    eval.resolutions = 32x24, 64x48, 128x96
    drift.triplets = 32x24/32x24/32x24; 32x24/64x48/64x48
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

Res = tuple[int, int]


class ConfigError(ValueError):
    """Parse or validation failure; the message names the offending line."""


def parse_res(text: str) -> Res:
    parts = text.strip().lower().split("x")
    if len(parts) != 2:
        raise ValueError(f"expected HxW, got {text.strip()!r}")
    h, w = int(parts[0]), int(parts[1])
    if h < 1 or w < 1:
        raise ValueError(f"resolution extents must be positive, got {text.strip()!r}")
    return h, w


def _res_list(text: str) -> tuple[Res, ...]:
    return tuple(parse_res(t) for t in text.split(",") if t.strip())


def _triplets(text: str) -> tuple[tuple[Res, ...], ...]:
    out = []
    for chunk in text.split(";"):
        if chunk.strip():
            members = tuple(parse_res(t) for t in chunk.split("/"))
            if len(members) != 3:
                raise ValueError(f"a triplet needs three resolutions, got {chunk.strip()!r}")
            out.append(members)
    return tuple(out)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text.strip()!r}")


def _fmt_res(r: Res) -> str:
    return f"{r[0]}x{r[1]}"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    repeats: int = 1  # seeds seed, seed+1, ... averaged in the tables

    model_patch: int = 4
    model_dim: int = 16
    model_blocks: int = 2
    model_keypoints: int = 5

    data_samples: int = 256  # per client
    data_eval_samples: int = 200
    data_eval_native: Res = (128, 96)
    data_family: tuple[Res, ...] = ((64, 48), (48, 36), (32, 24))

    train_rounds: int = 50
    train_epochs: int = 2
    train_batch_size: int = 32
    train_optimizer: str = "adamw"
    train_lr: float = 0.003
    train_method: str = "bilinear"

    loss_alpha: float = 1.0
    loss_gamma: float = 0.01
    loss_mu: float = 0.01

    eval_resolutions: tuple[Res, ...] = ((32, 24), (48, 36), (64, 48), (80, 60), (96, 72), (128, 96))
    eval_tau: float = 0.1

    drift_triplets: tuple[tuple[Res, ...], ...] = (
        ((32, 24), (32, 24), (32, 24)),
        ((32, 24), (32, 24), (64, 48)),
        ((32, 24), (64, 48), (64, 48)),
        ((32, 24), (48, 36), (64, 48)),
    )

    interp_methods: tuple[str, ...] = ("bilinear", "area", "bicubic")
    interp_source: Res = (32, 24)
    interp_targets: tuple[Res, ...] = ((48, 36), (64, 48))

    scaling_max_low: int = 3
    scaling_high: Res = (64, 48)
    scaling_low: Res = (32, 24)

    theory_samples: int = 32
    theory_clients: int = 3
    theory_m_phi: float = 1.0
    theory_radius: float = 10.0
    theory_trials: int = 500
    theory_rounds: int = 500
    theory_local_steps: int = 2
    theory_repeats: int = 20
    theory_instances: int = 5
    theory_equivalence_instances: int = 10

    embed_samples: int = 20
    embed_resolutions: tuple[Res, ...] = ((32, 24), (64, 48), (128, 96))
    embed_raf: bool = True

    def __post_init__(self):
        try:
            self.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def validate(self) -> None:
        positive = [
            "repeats", "model_patch", "model_dim", "model_blocks", "model_keypoints", "data_samples",
            "data_eval_samples", "train_rounds", "train_epochs", "train_batch_size", "theory_samples",
            "theory_clients", "theory_trials", "theory_rounds", "theory_local_steps", "theory_repeats",
            "theory_instances", "theory_equivalence_instances", "embed_samples",
        ]  # fmt: skip
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{_key(name)} must be >= 1")
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.train_optimizer not in ("sgd", "adamw"):
            raise ValueError(f"train.optimizer must be sgd or adamw, got {self.train_optimizer!r}")
        from .tensor import METHODS

        for m in (self.train_method, *self.interp_methods):
            if m not in METHODS:
                raise ValueError(f"unknown interpolation method {m!r}")
        for name in ("train_lr", "eval_tau", "theory_m_phi", "theory_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{_key(name)} must be > 0")
        for name in ("loss_alpha", "loss_gamma", "loss_mu", "scaling_max_low"):
            if getattr(self, name) < 0:
                raise ValueError(f"{_key(name)} must be >= 0")
        P = self.model_patch
        every = [*self.data_family, *self.eval_resolutions, self.data_eval_native, self.interp_source,
                 *self.interp_targets, self.scaling_high, self.scaling_low, *self.embed_resolutions,
                 *(r for t in self.drift_triplets for r in t)]  # fmt: skip
        for r in every:
            if r[0] % P or r[1] % P:
                raise ValueError(f"resolution {_fmt_res(r)} is not divisible by patch size {P}")
        if not self.data_family or list(self.data_family) != sorted(set(self.data_family), reverse=True):
            raise ValueError("data.family must be strictly decreasing")

    def dumps(self) -> str:
        """Canonical text form; parsing it gives back an equal config."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{_key(f.name)} = {_render(v)}")
        return "\n".join(lines) + "\n"

    def sha256(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.repeats)]


def _key(name: str) -> str:
    if "_" not in name or name in ("seed", "repeats"):
        return name
    section, rest = name.split("_", 1)
    return f"{section}.{rest}"


def _render(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, tuple) and len(v) == 2 and all(isinstance(x, int) for x in v):
        return _fmt_res(v)
    if isinstance(v, tuple) and v and isinstance(v[0], tuple) and isinstance(v[0][0], tuple):
        return "; ".join("/".join(_fmt_res(r) for r in t) for t in v)
    if isinstance(v, tuple):
        return ", ".join(_fmt_res(x) if isinstance(x, tuple) else str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _converter(f):
    default = f.default
    if f.name == "drift_triplets":
        return _triplets
    if f.name == "interp_methods":
        return lambda s: tuple(t.strip() for t in s.split(",") if t.strip())
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return lambda s: int(s.strip())
    if isinstance(default, float):
        return lambda s: float(s.strip())
    if isinstance(default, str):
        return lambda s: s.strip()
    if isinstance(default, tuple) and len(default) == 2 and isinstance(default[0], int):
        return parse_res
    return _res_list


_FIELDS = {_key(f.name): f for f in fields(ExperimentConfig)}


def loads(text: str, source: str = "<config>") -> ExperimentConfig:
    values: dict = {}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        f = _FIELDS[key]
        try:
            values[f.name] = _converter(f)(value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {e}") from None
    try:
        return ExperimentConfig(**values)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from None


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return loads(text, str(path))


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw)
