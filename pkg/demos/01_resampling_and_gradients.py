# %% [markdown]
# # Resampling and gradients
# The bilinear lift used for distillation, and a gradient check of the
# training objective on a small conv model.

# %%
import numpy as np

from rafsim import autodiff as ad
from rafsim.data import build_pyramid, gen_dataset
from rafsim.federated import batch_loss
from rafsim.losses import LossCoeffs
from rafsim.model import ModelConfig, ModelParams
from rafsim.tensor import apply_upsample, build_upsample_op, resize

# %% [markdown]
# A 2x2 image lifted to 4x4 with half-pixel centres. Border rows clamp.

# %%
img = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
print(resize(img, 4, 4)[..., 0])

# %% [markdown]
# The operator form is a sparse matrix with four taps per row; every row
# sums to one and applying it matches `resize` exactly.

# %%
op = build_upsample_op(2, 2, 4, 4)
print(op.dense().sum(axis=1))
print(np.array_equal(apply_upsample(op, img.reshape(4, 1)).reshape(4, 4, 1), resize(img, 4, 4)))

# %% [markdown]
# One synthetic scene rendered as a three-level pyramid.

# %%
sample = gen_dataset(1, 64, 48, 5, seed=0)[0]
levels = build_pyramid(sample.image, [(64, 48), (48, 36), (32, 24)], patch=4)
print([lv.shape for lv in levels])

# %% [markdown]
# Autodiff gradient of task + distillation + regulariser against central
# differences. Teachers are frozen at their current values for the
# difference quotient, which is exactly what stop-gradient means.

# %%
cfg = ModelConfig(patch=4, dim=8, blocks=1, keypoints=3)
params = ModelParams.init(cfg, 0)
rng = np.random.default_rng(0)
res = [(16, 12), (8, 4)]
imgs = rng.normal(size=(2, 16, 12, cfg.channels))
pyr = [build_pyramid(im, res, 4) for im in imgs]
batch = [np.stack([p[i] for p in pyr]) for i in range(2)]
targets = rng.uniform(size=(2, 4, 3, 3))
ops = [None, build_upsample_op(2, 1, 4, 3)]
coeffs = LossCoeffs(1.0, 0.01)

tape, _, parts = batch_loss(params, cfg, batch, targets, ops, coeffs)
g = ad.backward(tape, parts.total)
teachers = [n.value for n in tape.nodes if n.op == "stop_gradient"]


def f(p):
    return float(batch_loss(p, cfg, batch, targets, ops, coeffs, None, teachers)[2].total.value)


x = params.flatten()
name = params.names[0]
i = 0
e = np.zeros_like(x)
e[i] = 1e-5
fd = (f(params.unflatten(x + e)) - f(params.unflatten(x - e))) / 2e-5
print(name, g[name].ravel()[i], fd)
