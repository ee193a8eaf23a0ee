import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cases import BASE_1D, from_spec, op1d
from hjbilab.dependence import (BoundConstants, ergodic_bound_rhs, ergodic_dependence_experiment,
                                parabolic_bound_rhs, parabolic_dependence_experiment)
from hjbilab.discretization import Grid
from hjbilab.errors import ConfigurationError
from hjbilab.operator_model import CoefficientDistance, Modulus, RegularityCertificate

CERT = RegularityCertificate(C=1, C_sigma=1, C_f=1, omega=Modulus.linear(1), gamma=1.0, C_H=2)


def test_parabolic_constants_by_hand():
    bc = BoundConstants.parabolic(CERT)
    assert bc.C_bar == pytest.approx(4.0)
    assert bc.C_tilde == pytest.approx(2 * 16 + 2 + 16 + 4)


def test_parabolic_rhs_by_hand():
    dist = CoefficientDistance(0.1, 0.04, 0.0)
    assert parabolic_bound_rhs(dist, CERT, 1.0) == pytest.approx(17.4)
    np.testing.assert_allclose(parabolic_bound_rhs(dist, CERT, np.array([0.0, 0.5, 2.0])), [0.0, 8.7, 34.8])


def test_parabolic_rhs_trivial_cases():
    assert parabolic_bound_rhs(CoefficientDistance(0, 0, 0), CERT, 3.0) == 0.0
    assert parabolic_bound_rhs(CoefficientDistance(0, 0, 0.25), CERT, 2.0) == pytest.approx(0.5)


def test_parabolic_rhs_needs_gamma():
    with pytest.raises(ConfigurationError, match="gamma"):
        parabolic_bound_rhs(CoefficientDistance(0, 0, 0), CERT.with_(gamma=None), 1.0)


def test_ergodic_rhs_by_hand():
    cert = RegularityCertificate(C=1, C_sigma=0, C_f=0, omega=Modulus.linear(0))
    assert BoundConstants.ergodic(cert, 1.0, 1.0).M_tilde == pytest.approx(8.0)
    assert ergodic_bound_rhs(CoefficientDistance(0, 0.05, 0), cert, 1.0, ell_max=1.0) == pytest.approx(0.4)
    assert ergodic_bound_rhs(CoefficientDistance(0, 0, 0.3), cert, 1.0, ell_max=1.0) == pytest.approx(0.3)
    assert ergodic_bound_rhs(CoefficientDistance(0, 0, 0), cert, 1.0) == 0.0


dists = st.tuples(*[st.floats(0, 1)] * 3)


@settings(max_examples=100, deadline=None)
@given(dists, st.integers(0, 2), st.floats(0, 1), st.floats(0, 5), st.sampled_from([0.5, 0.8, 1.0]))
def test_parabolic_rhs_monotone_in_each_distance_and_linear_in_t(d, which, bump, t, gamma):
    cert = CERT.with_(gamma=gamma)
    lo = parabolic_bound_rhs(CoefficientDistance(*d), cert, t)
    d2 = list(d)
    d2[which] += bump
    assert parabolic_bound_rhs(CoefficientDistance(*d2), cert, t) >= lo
    assert parabolic_bound_rhs(CoefficientDistance(*d), cert, 2 * t) == pytest.approx(2 * lo, rel=1e-12, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(dists, st.integers(0, 2), st.floats(0, 1), st.floats(0, 3), st.floats(0, 2))
def test_ergodic_rhs_monotone_in_each_distance(d, which, bump, K, ell_max):
    lo = ergodic_bound_rhs(CoefficientDistance(*d), CERT, K, ell_max)
    d2 = list(d)
    d2[which] += bump
    assert ergodic_bound_rhs(CoefficientDistance(*d2), CERT, K, ell_max) >= lo


def test_identical_operators_hold_with_zero_gap():
    op = from_spec(BASE_1D)
    rep = parabolic_dependence_experiment(op, op, Grid.uniform(32), T=0.5)
    assert rep.verdict == "holds" and np.all(rep.empirical_curve == 0.0)
    erg = ergodic_dependence_experiment(op, op, Grid.uniform(32), T_long=1.0)
    assert erg.verdict == "holds" and erg.empirical_curve[0] == 0.0


def test_cost_shift_pair_is_nearly_tight():
    op = from_spec(BASE_1D)
    shifted = from_spec(dict(BASE_1D, cost=BASE_1D["cost"] + " + 0.1"))
    rep = parabolic_dependence_experiment(op, shifted, Grid.uniform(32), T=1.0)
    np.testing.assert_allclose(rep.empirical_curve, 0.1 * rep.times, atol=1e-12)
    assert rep.verdict == "holds" and np.all(rep.margin_curve >= -1e-12)
    erg = ergodic_dependence_experiment(op, shifted, Grid.uniform(32), T_long=1.0)
    assert erg.empirical_curve[0] == pytest.approx(0.1, abs=1e-6)
    assert erg.bound_curve[0] >= 0.1 and erg.verdict == "holds"


def test_drift_perturbation_of_viscous_isaacs_holds():
    op = op1d("1", "a1", "cos(2*pi*x1)", A=[-1, 1])
    pert = op1d("1", "a1 + 0.05*sin(2*pi*x1)", "cos(2*pi*x1)", A=[-1, 1])
    rep = parabolic_dependence_experiment(op, pert, Grid.uniform(64), T=1.0)
    assert rep.verdict == "holds" and np.all(rep.margin_curve[1:] > 0)


def test_bound_is_symmetric_in_the_pair():
    op = op1d("1", "a1", "cos(2*pi*x1)", A=[-1, 1])
    pert = op1d("1 + 0.1*sin(2*pi*x1)", "a1", "cos(2*pi*x1)", A=[-1, 1])
    g = Grid.uniform(32)
    r12 = parabolic_dependence_experiment(op, pert, g, T=0.5)
    r21 = parabolic_dependence_experiment(pert, op, g, T=0.5)
    np.testing.assert_allclose(r12.bound_curve, r21.bound_curve, rtol=1e-12)
    np.testing.assert_allclose(r12.empirical_curve, r21.empirical_curve, atol=1e-14)


def test_refinement_keeps_verdict():
    op = op1d("1", "a1", "cos(2*pi*x1)", A=[-1, 1])
    pert = op1d("1", "a1 + 0.05*sin(2*pi*x1)", "cos(2*pi*x1) + 0.05", A=[-1, 1])
    verdicts = [parabolic_dependence_experiment(op, pert, Grid.uniform(n), T=0.5).verdict for n in (16, 32, 64)]
    assert verdicts == ["holds"] * 3


def test_sigma_perturbation_in_ergodic_pipeline():
    op = op1d("1", "0", "cos(2*pi*x1)")
    pert = op1d("1 + 0.1*sin(2*pi*x1)", "0", "cos(2*pi*x1)")
    rep = ergodic_dependence_experiment(op, pert, Grid.uniform(64), T_long=1.0)
    assert rep.verdict == "holds"
    assert {"U1", "U2"} <= set(rep.details) and rep.margin_curve[0] > 0
    assert rep.constants.K_source.startswith("empirical")


def test_declared_K_is_used():
    op = op1d("1", "0", "cos(2*pi*x1)")
    pert = op1d("1", "0.05", "cos(2*pi*x1)")
    rep = ergodic_dependence_experiment(op, pert, Grid.uniform(32), K=1.0, T_long=1.0)
    assert rep.constants.K == 1.0 and rep.constants.K_source == "declared"


def test_degenerate_pair_without_coercivity_is_refused():
    a = op1d("0", "a1", "sin(2*pi*x1)", A=[-1, 1])
    b = op1d("0", "a1", "sin(2*pi*x1) + 0.01", A=[-1, 1])
    with pytest.raises(ConfigurationError, match="Lipschitz"):
        parabolic_dependence_experiment(a, b, Grid.uniform(16), T=0.2)


def test_coercive_degenerate_pair_certifies_gamma_one():
    a = op1d("0", "a1", "sin(2*pi*x1)", A=[-1, 1])
    b = op1d("0", "1.05*a1", "sin(2*pi*x1) + 0.05*cos(2*pi*x1)", A=[-1, 1])
    rep = parabolic_dependence_experiment(a, b, Grid.uniform(32), T=1.0, coercivity=(1.0, [0, 1]))
    assert rep.certificate.gamma == 1.0 and rep.details["gamma_source"].startswith("coercive")
    assert rep.verdict == "holds"


def test_ergodic_short_horizon_reports_inconclusive():
    op = op1d("1", "0", "cos(2*pi*x1)")
    pert = op1d("1", "0", "cos(2*pi*x1) + 0.01")
    rep = ergodic_dependence_experiment(op, pert, Grid.uniform(32), T_long=0.01)
    assert rep.verdict == "inconclusive" and "inconclusive_reason" in rep.details


def test_report_exports(tmp_path):
    op = op1d("1", "a1", "cos(2*pi*x1)", A=[-1, 1])
    pert = op1d("1", "a1", "cos(2*pi*x1) + 0.02", A=[-1, 1])
    rep = parabolic_dependence_experiment(op, pert, Grid.uniform(16), T=0.2)
    rep.to_json(tmp_path / "r.json")
    rep.to_csv(tmp_path / "r.csv")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["verdict"] == "holds" and len(data["times"]) == len(rep.times)
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["t", "empirical", "bound", "margin"] and len(rows) == len(rep.times) + 1
