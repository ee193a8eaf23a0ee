# %% [markdown]
# # Two-scale problems and the effective Hamiltonian
#
# Coefficients depend on a slow variable x and a fast periodic variable y.
# Freezing (x, p, X) gives a cell problem in y whose ergodic constant is the
# effective Hamiltonian.

# %%
import numpy as np

from hjbilab import (EffectiveHamiltonianCache, Grid, TwoScaleOperator, convergence_study, effective_hamiltonian,
                     effective_structure_check, solve_effective)

ts = TwoScaleOperator.from_text(
    [["0.6 + 0.2*cos(2*pi*y1)", "0"]], [["0", "1 + 0.3*sin(2*pi*(x1 + y1))"]],
    ["a1*(1 + 0.5*cos(2*pi*y1))"], ["0.5*sin(2*pi*y1) + 0.5*b1"],
    "cos(2*pi*(x1 + y1)) + 0.5*sin(2*pi*x1)", "sin(2*pi*x1)", A=[-1, 1], B=[-1, 1], nu=0.15, name="benchmark")
gy = Grid.uniform(32)
cache = EffectiveHamiltonianCache()
for x in np.linspace(0, 1, 5, endpoint=False):
    print(f"x = {x:.2f}  Hbar(x, 0.5, -1) = {effective_hamiltonian(ts, x, 0.5, -1.0, cache=cache, grid_y=gy):.5f}")

# %% [markdown]
# The effective Hamiltonian is Lipschitz in (x, p, X) with a fitted constant.

# %%
rep = effective_structure_check(ts, samples=12, grid_y=gy)
print("passed", rep.passed, "K_bar", rep.K_bar)

# %% [markdown]
# The eps-scaled solutions approach the effective one as eps shrinks.

# %%
eff = solve_effective(ts, Grid.uniform(32), 0.25, gy)
print("effective u(T) range", eff.final().values.min(), eff.final().values.max())
table = convergence_study(ts, [0.2, 0.1, 0.05], Grid((32, 32)), 0.25)
for row in table.rows:
    print(f"eps = {row['eps']:.2f}  sup error {row['error']:.4f}")
