"""Heatmap regressors.

``ConvPoseNet`` is a resolution-agnostic encoder-decoder: a stride-P patch
embedding, a residual depthwise 3x3 positional conv, a stack of residual
depthwise/pointwise blocks and a 1x1 head producing ``K`` heatmaps at 1/P
of the input resolution. Any input whose sides are multiples of ``P`` is
accepted by the same parameters.

``LinearModel`` freezes a random instance of that encoder and keeps only a
last-layer weight, which is the object the convergence analysis studies.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .tensor import UpsampleOp, build_upsample_op, resize


@dataclass(frozen=True)
class ModelConfig:
    patch: int = 4
    dim: int = 16
    blocks: int = 2
    keypoints: int = 5
    channels: int = 1

    def shapes(self) -> dict[str, tuple[int, ...]]:
        p, d, c, k = self.patch, self.dim, self.channels, self.keypoints
        s = {
            "patch_embed.kernel": (p, p, c, d),
            "patch_embed.bias": (d,),
            "gpe.kernel": (3, 3, d),
        }
        for b in range(self.blocks):
            s[f"block{b}.dw"] = (3, 3, d)
            s[f"block{b}.pw"] = (d, d)
            s[f"block{b}.bias"] = (d,)
        s["head.kernel"] = (d, k)
        s["head.bias"] = (k,)
        return s


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith(".bias"):
        return 0
    if len(shape) == 4:
        return shape[0] * shape[1] * shape[2]
    if len(shape) == 3:
        return shape[0] * shape[1]
    return shape[0]


class ModelParams:
    """Ordered named tensors; the unit exchanged between clients and server."""

    def __init__(self, tensors: dict[str, np.ndarray], config: ModelConfig | None = None):
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        self.config = config

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in config.shapes().items():
            fan_in = _fan_in(name, shape)
            if fan_in == 0:
                tensors[name] = np.zeros(shape)
            else:
                s = 1.0 / np.sqrt(fan_in)
                tensors[name] = rng.uniform(-s, s, size=shape)
        return cls(tensors, config)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        return cls({n: np.zeros(s) for n, s in config.shapes().items()}, config)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.config)

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def unflatten(self, flat: np.ndarray) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ValueError(f"expected {self.size} values, got {flat.size}")
        out, pos = {}, 0
        for name, v in self.tensors.items():
            out[name] = flat[pos : pos + v.size].reshape(v.shape).copy()
            pos += v.size
        return ModelParams(out, self.config)

    def check_compatible(self, other: "ModelParams") -> None:
        if self.names != other.names:
            raise ValueError(f"parameter names differ: {self.names} vs {other.names}")
        for name in self.names:
            if self[name].shape != other[name].shape:
                raise ValueError(f"shape mismatch for {name}: {self[name].shape} vs {other[name].shape}")

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(v * v) for v in self.tensors.values())))

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality."""
        return self.names == other.names and all(
            self[n].shape == other[n].shape and self[n].tobytes() == other[n].tobytes() for n in self.names
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, v in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    def save(self, directory: str | Path, seed: int | None = None, hyperparameters: dict | None = None) -> Path:
        """Write ``manifest.json`` plus one little-endian float64 ``.bin`` per tensor."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for name, v in self.tensors.items():
            fname = name.replace("/", "_") + ".bin"
            (directory / fname).write_bytes(np.ascontiguousarray(v, dtype="<f8").tobytes())
            entries.append({"name": name, "shape": list(v.shape), "file": fname})
        manifest = {
            "tensors": entries,
            "seed": seed,
            "model": asdict(self.config) if self.config else None,
            "hyperparameters": hyperparameters or {},
        }
        path = directory / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, directory: str | Path) -> "ModelParams":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        tensors = {}
        for e in manifest["tensors"]:
            raw = np.frombuffer((directory / e["file"]).read_bytes(), dtype="<f8")
            tensors[e["name"]] = raw.reshape(e["shape"]).astype(np.float64)
        config = ModelConfig(**manifest["model"]) if manifest.get("model") else None
        return cls(tensors, config)


def _as_batch(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4:
        raise ValueError(f"expected (H, W, C) or (N, H, W, C) image, got shape {img.shape}")
    return img


def param_nodes(tape: ad.Tape, params: ModelParams) -> dict[str, ad.Node]:
    return {name: tape.param(v, name) for name, v in params.items()}


def encode(x: ad.Node, p: dict[str, ad.Node], patch: int, blocks: int) -> ad.Node:
    """Backbone up to (and including) the pre-head activation."""
    h, w = x.shape[1], x.shape[2]
    if h % patch or w % patch:
        raise ValueError(f"input {h}x{w} is not divisible by patch size {patch}")
    z = ad.add(ad.conv2d(x, p["patch_embed.kernel"], stride=patch), p["patch_embed.bias"])
    z = ad.add(z, ad.depthwise_conv3x3(z, p["gpe.kernel"]))
    for b in range(blocks):
        u = ad.relu(ad.depthwise_conv3x3(z, p[f"block{b}.dw"]))
        z = ad.add(z, ad.add(ad.pointwise_conv1x1(u, p[f"block{b}.pw"]), p[f"block{b}.bias"]))
    return ad.relu(z)


def head(feat: ad.Node, p: dict[str, ad.Node]) -> ad.Node:
    return ad.add(ad.pointwise_conv1x1(feat, p["head.kernel"]), p["head.bias"])


def heatmap_node(x: ad.Node, p: dict[str, ad.Node], config: ModelConfig) -> ad.Node:
    return head(encode(x, p, config.patch, config.blocks), p)


def _config_of(params: ModelParams) -> ModelConfig:
    if params.config is not None:
        return params.config
    d, k = params["head.kernel"].shape
    kp, _, c, _ = params["patch_embed.kernel"].shape
    blocks = sum(1 for n in params.names if n.endswith(".dw"))
    return ModelConfig(patch=kp, dim=d, blocks=blocks, keypoints=k, channels=c)


def forward_heatmap(params: ModelParams, img: np.ndarray) -> np.ndarray:
    """Heatmaps ``(H/P, W/P, K)`` for one image, or ``(N, H/P, W/P, K)`` for a batch."""
    single = np.asarray(img).ndim == 3
    config = _config_of(params)
    tape = ad.Tape()
    out = heatmap_node(tape.constant(_as_batch(img)), param_nodes(tape, params), config).value
    return out[0] if single else out


def features(params: ModelParams, img: np.ndarray) -> np.ndarray:
    """Pre-head feature maps ``(N, H/P, W/P, D)``."""
    config = _config_of(params)
    tape = ad.Tape()
    return encode(tape.constant(_as_batch(img)), param_nodes(tape, params), config.patch, config.blocks).value


def export_embeddings(
    params: ModelParams, samples: Sequence, resolutions: Sequence[tuple[int, int]], method: str = "bilinear"
) -> list[tuple[tuple[int, int], int, np.ndarray]]:
    """Rows of ``(resolution, sample_id, pooled feature)``; one per sample and resolution."""
    rows = []
    for res in resolutions:
        for s in samples:
            img = resize(s.image, res[0], res[1], method) if s.image.shape[:2] != tuple(res) else s.image
            feat = features(params, img)[0]
            rows.append((tuple(res), s.sample_id, feat.mean(axis=(0, 1))))
    return rows


# -------------------------------------------------------------- linear model


@dataclass
class LinearModel:
    """Frozen features and a last-layer weight.

    ``features[k][i]`` is ``(n_k, d, m_i)``: column ``p`` of ``psi`` is the
    feature vector at heatmap pixel ``p``, so ``psi.T @ w`` is the heatmap.
    ``targets[k]`` is ``(n_k, m_0, K)``; ``ops[k][i]`` lifts level ``i`` to
    level ``i-1`` (``ops[k][0]`` is ``None``).
    """

    features: list[list[np.ndarray]]
    targets: list[np.ndarray]
    ops: list[list[UpsampleOp | None]]
    resolutions: list[list[tuple[int, int]]]
    w: np.ndarray
    feature_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for k, f in enumerate(self.features):
            f[:] = [a.copy() for a in f]
            for a in f:
                a.setflags(write=False)

    @property
    def n_clients(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features[0][0].shape[1]

    @property
    def n_keypoints(self) -> int:
        return self.targets[0].shape[2]

    def psi(self, k: int, j: int, i: int) -> np.ndarray:
        return self.features[k][i][j]


def build_linear_model(
    datasets: Sequence[Sequence],
    seed: int,
    M_phi: float,
    resolutions: Sequence[Sequence[tuple[int, int]]],
    config: ModelConfig | None = None,
    method: str = "bilinear",
) -> LinearModel:
    """Freeze a random encoder and extract per-level features for each client.

    ``datasets[k]`` are client ``k``'s samples at its native resolution
    ``resolutions[k][0]``; lower levels are resized from the native image.
    All features share one scale factor chosen so the largest spectral norm
    equals ``M_phi``.
    """
    if not datasets or any(len(d) == 0 for d in datasets):
        raise ValueError("datasets must be nonempty")
    config = config or ModelConfig()
    encoder = ModelParams.init(config, seed)
    # keep the features away from the all-zero relu regime
    for name in encoder.names:
        if name.endswith(".bias"):
            encoder.tensors[name] = np.full(encoder[name].shape, 0.1)

    feats, targets, ops = [], [], []
    for samples, res in zip(datasets, resolutions):
        levels = []
        for (h, w) in res:
            batch = np.stack([s.image if s.image.shape[:2] == (h, w) else resize(s.image, h, w, method) for s in samples])
            f = features(encoder, batch)  # (n, gh, gw, d)
            n, gh, gw, d = f.shape
            levels.append(f.reshape(n, gh * gw, d).transpose(0, 2, 1))
        feats.append(levels)
        targets.append(np.stack([s.target.reshape(-1, s.target.shape[-1]) for s in samples]))
        grids = [(h // config.patch, w // config.patch) for (h, w) in res]
        ops.append([None] + [build_upsample_op(*grids[i], *grids[i - 1]) for i in range(1, len(grids))])

    top = max(np.linalg.norm(a, ord=2, axis=(1, 2)).max() for lv in feats for a in lv)
    factor = M_phi / top if top > 0 else 1.0
    feats = [[a * factor for a in lv] for lv in feats]
    w = np.zeros((config.dim, targets[0].shape[2]))
    return LinearModel(feats, targets, ops, [list(r) for r in resolutions], w, factor, seed)


def linear_forward(lm: LinearModel, k: int, j: int, i: int, w: np.ndarray | None = None) -> np.ndarray:
    """Heatmap ``psi.T @ w`` of shape ``(m_i, K)``."""
    if not (0 <= k < lm.n_clients) or not (0 <= i < len(lm.features[k])) or not (0 <= j < lm.features[k][i].shape[0]):
        raise IndexError(f"index (k={k}, j={j}, i={i}) out of range")
    return lm.features[k][i][j].T @ (lm.w if w is None else w)
