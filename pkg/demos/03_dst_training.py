# %% [markdown]
# # Dynamic sparse training at desk scale
#
# A 90% sparse MLP on Gaussian clusters trained with RigL. Every 100 steps a
# third of each layer's active weights are pruned by magnitude and the same
# number regrown where the dense gradient is largest. We train once with
# plain momentum SGD and once with the sparsity preconditioner.

# %%
from sparselab.lab.config import ExperimentConfig
from sparselab.lab.experiments import train

base = ExperimentConfig(seed=0, epochs=20, sparsity=0.9, dst_method="rigl", cluster_std=0.5, out="")
runs = {opt: train(base.replace(optimizer=opt)) for opt in ("sgd", "sparseopt")}

# %%
for opt, res in runs.items():
    print(opt)
    for row in res.rows[::4] + res.rows[-1:]:
        epoch, loss, train_acc, test_acc, lr, r_m = row[:6]
        print(f"  epoch {epoch:3d}  loss {loss:.3f}  test acc {test_acc:.3f}  lr {lr:.4f}  R_m {r_m:.3f}")

# %% [markdown]
# Active counts never move. Only which weights are active changes, and the
# union of everything ever active (`R_m`) keeps growing.

# %%
res = runs["sparseopt"]
for key in res.managed:
    print(key, "active per epoch:", sorted(set(res.column(f"{key}_active"))))
print("mask updates:", len(res.update_steps), "events:", len(res.events))
