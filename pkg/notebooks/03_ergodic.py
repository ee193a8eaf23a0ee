# %% [markdown]
# # Ergodic constants
#
# Two estimators: vanishing discount (delta w_delta over a decreasing
# schedule of discounts) and the long-time slope of the Cauchy problem.
# They should agree to the discretization error.

# %%
from hjbilab import Grid, HJBIOperator, corrector_regularity_check, ergodic_long_time, ergodic_vanishing_discount

grid = Grid.uniform(256)
cosine = HJBIOperator.from_text([["1"]], ["0"], "cos(2*pi*x1)")
vd = ergodic_vanishing_discount(cosine, grid)
lt = ergodic_long_time(cosine, grid, T=1.0)
print(f"vanishing discount U = {vd.U:.2e}, long time U = {lt.U:.2e}")

# %% [markdown]
# The discounted correctors w_delta - w_delta(0) keep a bounded seminorm as
# delta shrinks.

# %%
rep = corrector_regularity_check(vd.solves)
print("seminorms", [f"{s:.4f}" for s in rep.seminorms], "ratio", f"{rep.ratio:.4f}")

# %% [markdown]
# A game with a controlled drift: the limit is stable under refinement.

# %%
isaacs = HJBIOperator.from_text([["1"]], ["a1"], "cos(2*pi*x1)", A=[-1, 1])
for n in (64, 128, 256):
    print(n, ergodic_vanishing_discount(isaacs, Grid.uniform(n)).U)
