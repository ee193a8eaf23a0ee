import json

import numpy as np
import pytest

from hjbilab.discretization import DiscreteOperator, Grid
from hjbilab.ergodic import (DEFAULT_SCHEDULE, corrector_regularity_check, ergodic_long_time,
                             ergodic_vanishing_discount, solve_discounted)
from hjbilab.errors import ConfigurationError, InconclusiveError
from hjbilab.operator_model import CoefficientField, HJBIOperator


def op1d(sigma="1", drift="0", cost="0", A=None, B=None):
    return HJBIOperator.from_text([[sigma]], [drift], cost, A=A, B=B)


def cosine():
    return op1d("1", "0", "cos(2*pi*x1)")


def viscous_isaacs():
    return op1d("1", "a1", "cos(2*pi*x1)", A=[-1, 1])


def test_constant_cost_discounted_solution_is_exact():
    s = solve_discounted(op1d("0", "0", "0.7"), Grid.uniform(8), delta=0.1)
    np.testing.assert_allclose(s.w.values, -7.0, rtol=1e-14)
    assert s.scaled_sup() == pytest.approx(0.7, rel=1e-14)
    s2 = solve_discounted(op1d("0", "0", "0.7"), Grid.uniform(8), delta=0.2)
    assert s2.w.sup_norm() == pytest.approx(s.w.sup_norm() / 2, rel=1e-14)


def test_discounted_bound_on_cosine_example():
    s = solve_discounted(cosine(), Grid.uniform(128), delta=1e-2)
    assert s.scaled_sup() <= 1 + 1e-8
    assert s.residual <= 1e-9


@pytest.mark.parametrize("method", ["policy", "explicit"])
def test_both_discounted_methods_agree(method):
    g = Grid.uniform(16)
    ref = solve_discounted(viscous_isaacs(), g, delta=0.5, tol=1e-11)
    s = solve_discounted(viscous_isaacs(), g, delta=0.5, tol=1e-11, method=method)
    np.testing.assert_allclose(s.w.values, ref.w.values, atol=1e-9)


def test_discounted_solution_does_not_depend_on_initial_guess():
    g = Grid.uniform(64)
    op = op1d("1", "a1 + b1", "cos(2*pi*x1) + 0.3*a1*b1", A=[-1, 1], B=[-0.5, 0.5])
    a = solve_discounted(op, g, delta=3e-2)
    b = solve_discounted(op, g, delta=3e-2, initial=np.random.default_rng(0).normal(size=64) * 50, shift=4.0)
    np.testing.assert_allclose(a.w.values, b.w.values, atol=1e-8)


def test_unknown_method_and_bad_discount():
    with pytest.raises(ConfigurationError):
        solve_discounted(cosine(), Grid.uniform(8), delta=0.0)
    with pytest.raises(ConfigurationError):
        solve_discounted(cosine(), Grid.uniform(8), method="newton")


def test_constant_cost_ergodic_constant_from_both_estimators():
    g = Grid.uniform(8)
    vd = ergodic_vanishing_discount(op1d("0", "0", "0.7"), g)
    lt = ergodic_long_time(op1d("0", "0", "0.7"), g, T=1.0)
    assert vd.U == pytest.approx(0.7, abs=1e-9) and lt.U == pytest.approx(0.7, abs=1e-9)
    assert np.all(vd.corrector.values == 0.0)
    assert vd.signed_limits == {"minus_limit": vd.U, "plus_limit": -vd.U}


def test_cosine_mean_oracle():
    g = Grid.uniform(128)
    vd = ergodic_vanishing_discount(cosine(), g)
    lt = ergodic_long_time(cosine(), g, T=1.0)
    assert abs(vd.U) <= 1e-3 and abs(lt.U) <= 1e-3
    assert abs(vd.U - lt.U) <= 2e-3
    assert vd.diagnostics["cell_residual"] <= 10 * 1e-9 + 1e-3


def test_viscous_isaacs_matches_fine_grid():
    coarse = ergodic_vanishing_discount(viscous_isaacs(), Grid.uniform(256))
    fine = ergodic_vanishing_discount(viscous_isaacs(), Grid.uniform(2048))
    assert abs(coarse.U - fine.U) <= 1e-3


def test_reference_node_does_not_change_limit():
    g = Grid.uniform(64)
    a = ergodic_vanishing_discount(viscous_isaacs(), g, ref_node=0)
    b = ergodic_vanishing_discount(viscous_isaacs(), g, ref_node=40)
    assert abs(a.U - b.U) <= 2e-3


@pytest.mark.parametrize("c", [0.25, -1.0])
def test_shift_covariance(c):
    g = Grid.uniform(64)
    base = viscous_isaacs()
    shifted = base.replace(cost=CoefficientField.scalar(f"cos(2*pi*x1) + ({c})"))
    a = ergodic_vanishing_discount(base, g)
    b = ergodic_vanishing_discount(shifted, g)
    assert b.U - a.U == pytest.approx(c, abs=1e-9)
    np.testing.assert_allclose(b.corrector.values, a.corrector.values, atol=1e-8)


def test_short_horizon_is_inconclusive():
    with pytest.raises(InconclusiveError, match="increase T"):
        ergodic_long_time(cosine(), Grid.uniform(64), T=0.01)


def test_schedule_must_decrease():
    with pytest.raises(ConfigurationError, match="decreasing"):
        ergodic_vanishing_discount(cosine(), Grid.uniform(16), schedule=[1e-2, 1e-1])


def test_corrector_regularity_on_cosine_and_constant():
    rep = corrector_regularity_check(ergodic_vanishing_discount(cosine(), Grid.uniform(128)).solves)
    assert rep.bounded and rep.ratio <= 1.05
    assert rep.deltas == list(DEFAULT_SCHEDULE)
    const = corrector_regularity_check(ergodic_vanishing_discount(op1d("0", "0", "0.7"), Grid.uniform(8)).solves)
    assert const.K_emp == 0.0 and const.bounded


def test_mixing_correctors_of_different_operators_fails_regularity():
    g = Grid.uniform(64)
    s1 = ergodic_vanishing_discount(cosine(), g, schedule=[1e-1, 1e-2]).solves
    s2 = ergodic_vanishing_discount(op1d("1", "0", "3*cos(2*pi*x1)"), g, schedule=[1e-1, 1e-2]).solves
    assert not corrector_regularity_check([s1[0], s2[1]]).bounded


def test_vanishing_discount_diagnostics_and_export(tmp_path):
    dop = DiscreteOperator.from_operator(viscous_isaacs(), Grid.uniform(32))
    res = ergodic_vanishing_discount(dop)
    d = res.diagnostics
    assert len(d["estimates"]) == len(DEFAULT_SCHEDULE)
    assert d["delta_w_ref"][-1] == -res.U
    assert max(d["scaled_sup"]) <= 1 + 1e-8
    res.export(tmp_path)
    data = json.loads((tmp_path / "ergodic.json").read_text())
    assert data["U"] == res.U and (tmp_path / data["corrector_file"]).exists()
