# %% [markdown]
# # Operators and the monotone scheme
#
# An operator is given by text expressions for sigma, the drift f and the
# cost l, plus finite control sets A (maximizer) and B (minimizer). The
# Hamiltonian is min over B of max over A of -tr(sigma sigma^T X) + f.p + l.

# %%
import numpy as np

from hjbilab import DiscreteOperator, Grid, HJBIOperator, cfl_timestep, evaluate_hamiltonian

op = HJBIOperator.from_text([["1 + 0.2*sin(2*pi*x1)"]], ["a1 + 0.5*b1"], "cos(2*pi*x1) + 0.3*a1*b1",
                            A=[-1, 1], B=[-0.5, 0.5], name="isaacs")
evaluate_hamiltonian(op, [0.25], [1.0], [[0.5]])

# %% [markdown]
# On a periodic grid the scheme uses central second differences and upwind
# first differences. The largest monotone explicit step is the CFL step.

# %%
grid = Grid.uniform(64)
dop = DiscreteOperator.from_operator(op, grid)
dt = cfl_timestep(dop)
print(f"dt = {dt:.3e}  (0.9 / (2 a / h^2 + |f| / h) with a, |f| maximal)")

# %% [markdown]
# Monotonicity: raising one node value never lowers the explicit update
# anywhere.

# %%
rng = np.random.default_rng(0)
u = rng.normal(size=grid.shape)
base = u - dt * dop.hamiltonian(u)
worst = 0.0
for j in range(grid.node_count):
    v = u.copy()
    v[j] += 1.0
    worst = max(worst, float(np.max(base - (v - dt * dop.hamiltonian(v)))))
print("largest decrease after raising a neighbor:", worst)
