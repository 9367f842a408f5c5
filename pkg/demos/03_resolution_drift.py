# %% [markdown]
# # Resolution drift and distillation
# A reduced federated run: three clients, small model, few rounds. Mixing
# a high-resolution client into a low-resolution federation costs accuracy
# at the low resolution; distillation across each client's pyramid helps
# the model hold up away from its training resolutions. The full-size
# numbers come from `rafsim drift` and `rafsim compare`.

# %%
from dataclasses import replace

from rafsim import experiments as ex
from rafsim.config import ExperimentConfig
from rafsim.metrics import eval_sweep

cfg = replace(ExperimentConfig(), train_rounds=15, data_samples=96, data_eval_samples=100)

# %%
low, high = (32, 24), (64, 48)
drift = ex.drift_table(replace(cfg, drift_triplets=((low, low, low), (low, high, high))))
for row in drift:
    print(*row)

# %% [markdown]
# Base versus RAF under FedAvg, evaluated across the resolution sweep.

# %%
base = ex.train(cfg, cfg.data_family, False, "fedavg", cfg.seed)
raf = ex.train(cfg, cfg.data_family, True, "fedavg", cfg.seed)
ev = ex.eval_set(cfg, cfg.seed)
for b, r in zip(eval_sweep(base.params, ev, cfg.eval_resolutions), eval_sweep(raf.params, ev, cfg.eval_resolutions)):
    print(b.resolution, round(b.pck, 3), round(r.pck, 3))
