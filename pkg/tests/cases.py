"""Operators shared by the test modules."""

import numpy as np

from hjbilab.homogenization import TwoScaleOperator
from hjbilab.operator_model import HJBIOperator

BASE_1D = dict(sigma=[["1 + 0.2*sin(2*pi*x1)"]], drift=["a1 + 0.5*b1"],
               cost="cos(2*pi*x1) + 0.3*a1*b1", A=[-1, 1], B=[-0.5, 0.5])

BASE_2D = dict(sigma=[["1 + 0.2*sin(2*pi*x2)", "0.3"], ["0", "0.8"]], drift=["a1", "b1"],
               cost="cos(2*pi*x1)*sin(2*pi*x2) + 0.2*a1*b1", A=[-1, 1], B=[-0.5, 0.5])


def op1d(sigma="1", drift="0", cost="0", A=None, B=None, name=""):
    return HJBIOperator.from_text([[sigma]], [drift], cost, A=A, B=B, name=name)


def from_spec(spec, name=""):
    return HJBIOperator.from_text(spec["sigma"], spec["drift"], spec["cost"], A=spec["A"], B=spec["B"], name=name)


def _bump(rng, amp, n):
    k = rng.integers(1, 3, size=n)
    phase = rng.random()
    arg = " + ".join(f"{int(k[i])}*x{i + 1}" for i in range(n))
    return f"{amp:.6g}*sin(2*pi*({arg} + {phase:.6g}))"


def perturbed(spec, n, rng, max_amp=0.1):
    """Random smooth perturbation of sigma's diagonal, the drift and the cost, each of size <= max_amp."""
    a_sigma, a_f, a_ell = rng.uniform(0, max_amp, 3)
    sigma = [list(row) for row in spec["sigma"]]
    for i in range(n):
        sigma[i][i] = f"({sigma[i][i]}) + {_bump(rng, a_sigma / np.sqrt(n), n)}"
    drift = [f"({d}) + {_bump(rng, a_f / np.sqrt(n), n)}" for d in spec["drift"]]
    cost = f"({spec['cost']}) + {_bump(rng, a_ell, n)}"
    return dict(spec, sigma=sigma, drift=drift, cost=cost)


def perturbation_pairs(count_1d=6, count_2d=4, seed=2024):
    """Randomized (op1, op2, n) pairs with perturbation amplitudes <= 0.1."""
    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(count_1d):
        pairs.append((from_spec(BASE_1D, "base1d"), from_spec(perturbed(BASE_1D, 1, rng), f"pert1d-{k}"), 1))
    for k in range(count_2d):
        pairs.append((from_spec(BASE_2D, "base2d"), from_spec(perturbed(BASE_2D, 2, rng), f"pert2d-{k}"), 2))
    return pairs


def benchmark_two_scale(nu=0.15):
    return TwoScaleOperator.from_text(
        [["0.6 + 0.2*cos(2*pi*y1)", "0"]], [["0", "1 + 0.3*sin(2*pi*(x1 + y1))"]],
        ["a1*(1 + 0.5*cos(2*pi*y1))"], ["0.5*sin(2*pi*y1) + 0.5*b1"],
        "cos(2*pi*(x1 + y1)) + 0.5*sin(2*pi*x1)", "sin(2*pi*x1)", A=[-1, 1], B=[-1, 1], nu=nu,
        name="benchmark")


def y_independent_two_scale():
    return TwoScaleOperator.from_text(
        [["0.8", "0"]], [["0", "1"]], ["a1"], ["0"], "cos(2*pi*x1) + 0.3*b1", "sin(2*pi*x1)",
        A=[-1, 1], B=[-1, 1], nu=0.5, name="y-independent")
