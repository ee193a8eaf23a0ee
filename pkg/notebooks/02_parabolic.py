# %% [markdown]
# # Cauchy problems
#
# `solve_parabolic` marches u_t + H(x, Du, D^2u) = 0 with explicit Euler at
# the CFL step, landing exactly on T.

# %%
import numpy as np

from hjbilab import Grid, HJBIOperator, long_time_slope, solve_parabolic

heat = HJBIOperator.from_text([["1"]], ["0"], "0")
for n in (64, 128, 256):
    g = Grid.uniform(n)
    tr = solve_parabolic(heat, g, T=0.05, initial="sin(2*pi*x1)")
    exact = np.exp(-4 * np.pi**2 * 0.05) * np.sin(2 * np.pi * g.points()[:, 0])
    print(f"n = {n:4d}  sup error {np.max(np.abs(tr.final().values - exact)):.3e}")

# %% [markdown]
# A constant cost l = 0.7 gives u(t) = -0.7 t exactly, and the long-time
# slope of any solution estimates minus the ergodic constant.

# %%
const = HJBIOperator.from_text([["0"]], ["0"], "0.7")
tr = solve_parabolic(const, Grid.uniform(8), T=2.0)
print("u(T) =", tr.final().values[0])
slope, spread = long_time_slope(tr)
print("slope", slope, "spread", spread)
