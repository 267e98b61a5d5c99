# %% [markdown]
# # Batch norm amplifies the gradients of sparse neurons
#
# A masked first layer feeds a batch-normalized hidden layer. We compare the
# first-layer gradients of the masked model against a dense twin that shares
# its weights, on the active entries only, for a few sparsity levels.

# %%
import numpy as np

from sparselab.lab.config import ExperimentConfig
from sparselab.lab.experiments import run_grad_skew

cfg = ExperimentConfig(experiment="grad-skew", seed=0, sparsities=[0.0, 0.5, 0.75, 0.9], batches=50, out="")
rows, _, spread = run_grad_skew(cfg)

# %% [markdown]
# With batch norm the ratio follows `(1 - s) ** -0.5`. Without it the ratio
# stays near one.

# %%
print(f"{'s':>5} {'theory':>8} {'with BN':>8} {'no BN':>8} {'precond':>8}")
for s, theory, bn, no_bn, pre, *_ in rows:
    print(f"{s:5.2f} {theory:8.3f} {bn:8.3f} {no_bn:8.3f} {pre:8.3f}")

# %% [markdown]
# Neurons of a layer rarely share one sparsity. Half the neurons below are
# dense and half keep a quarter of their inputs. The per-row preconditioner
# brings their gradient scales back together.

# %%
for level, n, raw, pre in spread:
    print(f"s_i={level:.2f}  neurons={n:3d}  mean|g|={raw:.5f}  preconditioned={pre:.5f}")
raw = [r[2] for r in spread]
pre = [r[3] for r in spread]
print("spread before:", round(max(raw) / min(raw), 3), "after:", round(max(pre) / min(pre), 3))
