# %% [markdown]
# # A student neuron that has to change sign
#
# The teacher is one ReLU neuron behind full-dataset batch norm with output
# weight `a = +1`. The student starts at `a = -1`. Plain gradient flow keeps
# `a^2 - gamma^2 - beta^2` fixed, which pins `a` away from zero, so it cannot
# cross over. The hyperbolic metric changes the conserved quantity and lets
# `a` pass through zero.

# %%
from sparselab import flows

common = dict(eta=0.01, alpha=4.0, steps=10_000, seed=1, record_every=1000)
gf = flows.run_flow_experiment(flows.FlowConfig("gf", **common))
ham = flows.run_flow_experiment(flows.FlowConfig("ham", **common))

# %%
for name, res in (("GF", gf), ("HAM", ham)):
    print(name)
    for step, loss, a, gamma, beta, gfi, hami in res.trajectory():
        print(f"  step {step:5d}  loss {loss:9.2e}  a {a:+.4f}  gamma {gamma:+.4f}  beta {beta:+.4f}")

# %% [markdown]
# The feasibility test agrees: at `a = gamma = 1, beta = 0` the HAM balance set
# reaches `a = 0` with `gamma` still non-zero.

# %%
print("feasible:", flows.sign_flip_feasible(1.0, 1.0, 0.0, 4.0))
print("HAM invariant at init:", flows.ham_invariant(1.0, 1.0, 0.0, 4.0))
