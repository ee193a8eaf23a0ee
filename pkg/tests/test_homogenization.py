import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cases import benchmark_two_scale, y_independent_two_scale
from hjbilab.discretization import Grid
from hjbilab.errors import ConfigurationError, EllipticityError, InfeasibleError
from hjbilab.homogenization import (EffectiveHamiltonianCache, TwoScaleOperator, build_cell_operator,
                                    convergence_study, effective_hamiltonian, effective_structure_check,
                                    solve_effective, solve_two_scale)
from hjbilab.operator_model import HJBIOperator, evaluate_hamiltonian
from hjbilab.parabolic import solve_parabolic

GY = Grid.uniform(32)


def additive_cosine(L0="0.5*sin(2*pi*x1)"):
    return TwoScaleOperator.from_text([["1", "0"]], [["0", "1"]], ["0"], ["0"], f"{L0} + cos(2*pi*y1)",
                                      "cos(2*pi*x1)", nu=1.0)


def cell_cost(cell, y, ia=0, ib=0):
    _, _, ell = cell.cell_operator.sample(np.array([[y]]))
    return ell[ia, ib, 0]


@pytest.mark.parametrize("y", [0.0, 0.13, 0.4, 0.71, 0.9])
def test_cell_cost_without_gradient_is_the_running_cost(y):
    ts = benchmark_two_scale()
    cell = build_cell_operator(ts, 0.3, 0.0, 0.0)
    expect = np.cos(2 * np.pi * (0.3 + y)) + 0.5 * np.sin(2 * np.pi * 0.3)
    assert cell_cost(cell, y) == pytest.approx(expect, abs=1e-14)


@pytest.mark.parametrize("y, ia, ib", [(0.1, 0, 0), (0.25, 1, 0), (0.5, 0, 1), (0.66, 1, 1), (0.95, 1, 0)])
def test_cell_cost_matches_hand_substitution(y, ia, ib):
    ts = benchmark_two_scale()
    x, p, X = 0.2, 0.7, -1.3
    a = [-1.0, 1.0][ia]
    cell = build_cell_operator(ts, x, p, X)
    m = (0.6 + 0.2 * np.cos(2 * np.pi * y)) ** 2
    g = a * (1 + 0.5 * np.cos(2 * np.pi * y))
    ell = np.cos(2 * np.pi * (x + y)) + 0.5 * np.sin(2 * np.pi * x)
    assert cell_cost(cell, y, ia, ib) == pytest.approx(-m * X + p * g + ell, abs=1e-13)
    s, f, _ = cell.cell_operator.sample(np.array([[y]]))
    assert s[ia, ib, 0, 0, 1] == pytest.approx(1 + 0.3 * np.sin(2 * np.pi * (x + y)))
    assert f[ia, ib, 0, 0] == pytest.approx(0.5 * np.sin(2 * np.pi * y) + 0.5 * [-1.0, 1.0][ib])


def test_y_independent_cell_cost_is_constant_and_corrector_vanishes():
    ts = y_independent_two_scale()
    cell = build_cell_operator(ts, 0.4, 0.5, 0.2)
    vals = [cell_cost(cell, y, 1, 0) for y in np.linspace(0, 1, 7)]
    assert np.ptp(vals) == 0.0
    assert cell.omega(0.3) == pytest.approx(0.0)


def test_y_independent_effective_hamiltonian_is_the_direct_minmax():
    ts = y_independent_two_scale()
    slow = ts.slow_operator()
    rng = np.random.default_rng(5)
    for _ in range(20):
        x, p, X = rng.random(), rng.normal(), rng.normal()
        direct = evaluate_hamiltonian(slow, [x], [p], [[X]])
        assert abs(effective_hamiltonian(ts, x, p, X, grid_y=GY) - direct) <= 1e-10


def test_additive_cosine_averages_out():
    ts = additive_cosine()
    for x in (0.1, 0.35, 0.8):
        hbar = effective_hamiltonian(ts, x, 0.0, 0.0, grid_y=Grid.uniform(64))
        assert hbar == pytest.approx(0.5 * np.sin(2 * np.pi * x), abs=1e-3)


def test_benchmark_hamiltonian_stable_under_refinement():
    ts = benchmark_two_scale()
    args = (0.3, 0.8, -0.5)
    coarse = effective_hamiltonian(ts, *args, grid_y=Grid.uniform(128))
    fine = effective_hamiltonian(ts, *args, grid_y=Grid.uniform(256))
    assert abs(coarse - fine) <= 1e-3


@settings(max_examples=8, deadline=None)
@given(st.floats(0, 1), st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 2))
def test_effective_hamiltonian_is_degenerate_elliptic(x, p, X, lift):
    ts = benchmark_two_scale()
    assert effective_hamiltonian(ts, x, p, X + lift, grid_y=GY) <= effective_hamiltonian(ts, x, p, X, grid_y=GY) + 1e-9


@pytest.mark.parametrize("c", [0.2, -0.7])
def test_cost_shift_moves_effective_hamiltonian_by_the_same_constant(c):
    ts = benchmark_two_scale()
    shifted = ts.replace(L=f"cos(2*pi*(x1 + y1)) + 0.5*sin(2*pi*x1) + ({c})")
    a = effective_hamiltonian(ts, 0.4, 0.3, 0.1, grid_y=GY)
    b = effective_hamiltonian(shifted, 0.4, 0.3, 0.1, grid_y=GY)
    assert b - a == pytest.approx(c, abs=1e-8)


def test_cache_returns_bit_identical_values_and_counts_hits():
    ts = benchmark_two_scale()
    cache = EffectiveHamiltonianCache(step=1e-3)
    v1 = effective_hamiltonian(ts, 0.3, 0.5, 0.1, cache, GY)
    v2 = effective_hamiltonian(ts, 0.3, 0.5 + 2e-4, 0.1, cache, GY)
    assert v1 == v2 and (cache.hits, cache.misses) == (1, 1)
    assert len(cache) == 1


def test_cache_first_writer_wins():
    cache = EffectiveHamiltonianCache()
    key = cache.key(0.1, 0.2, 0.3)
    assert cache.put(key, 1.0) == 1.0
    assert cache.put(key, 2.0) == 1.0 and cache.get(key) == 1.0


def test_cache_persists_across_instances(tmp_path):
    ts = benchmark_two_scale()
    path = tmp_path / "hbar.jsonl"
    first = EffectiveHamiltonianCache(path=path)
    vals = [effective_hamiltonian(ts, x, 0.2, 0.0, first, GY) for x in (0.1, 0.6)]
    second = EffectiveHamiltonianCache(path=path)
    assert len(second) == 2
    assert [effective_hamiltonian(ts, x, 0.2, 0.0, second, GY) for x in (0.1, 0.6)] == vals
    assert second.misses == 0


def test_cache_concurrent_inserts_keep_one_record(tmp_path):
    cache = EffectiveHamiltonianCache(path=tmp_path / "c.jsonl")
    key = cache.key(0.5, 0.5, 0.5)
    out = []
    threads = [threading.Thread(target=lambda v=v: out.append(cache.put(key, float(v)))) for v in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(out)) == 1
    assert len((tmp_path / "c.jsonl").read_text().splitlines()) == 1


def test_cache_rejects_nonpositive_step():
    with pytest.raises(ConfigurationError):
        EffectiveHamiltonianCache(step=0.0)


def test_structure_check_on_benchmark_fits_finite_constant():
    rep = effective_structure_check(benchmark_two_scale(), samples=12, grid_y=GY)
    assert rep.passed and np.isfinite(rep.K_bar) and rep.n_pairs == 12


def test_structure_check_identical_pairs_give_zero():
    ts = y_independent_two_scale()
    triple = (np.array([0.3]), np.array([0.5]), np.array([[0.2]]))
    rep = effective_structure_check(ts, samples=[(triple, triple)] * 10, grid_y=GY)
    assert rep.passed and rep.K_bar == 0.0 and rep.ratios == [0.0] * 10


def test_structure_check_needs_ten_pairs():
    triple = (np.array([0.3]), np.array([0.5]), np.array([[0.2]]))
    with pytest.raises(ConfigurationError, match="at least 10"):
        effective_structure_check(y_independent_two_scale(), samples=[(triple, triple)] * 3)


def test_degenerate_fast_diffusion_is_refused():
    ts = benchmark_two_scale().replace(Sigma=[["0", "0.2*sin(2*pi*y1)"]], nu=0.01)
    with pytest.raises(EllipticityError):
        effective_structure_check(ts, samples=10, grid_y=GY)
    with pytest.raises(EllipticityError):
        effective_hamiltonian(ts, 0.1, 0.0, 0.0, grid_y=GY)


def test_declared_nu_above_the_data_is_refused():
    with pytest.raises(EllipticityError, match="nu"):
        effective_structure_check(benchmark_two_scale(nu=0.5), samples=10, grid_y=GY)


def test_effective_solve_reduces_to_slow_solve_when_y_independent():
    ts = y_independent_two_scale()
    gx = Grid.uniform(32)
    eff = solve_effective(ts, gx, 0.2, Grid.uniform(8))
    ref = solve_parabolic(ts.slow_operator(), gx, T=0.2, initial=ts.initial(gx), dt=eff.dt)
    assert np.max(np.abs(eff.final().values - ref.final().values)) <= 1e-8


def test_effective_solve_with_additive_cosine_matches_averaged_cost():
    ts = additive_cosine()
    gx = Grid.uniform(32)
    eff = solve_effective(ts, gx, 0.1, Grid.uniform(32))
    avg = HJBIOperator.from_text([["1", "0"]], ["0"], "0.5*sin(2*pi*x1)")
    ref = solve_parabolic(avg, gx, T=0.1, initial="cos(2*pi*x1)", dt=eff.dt)
    assert np.max(np.abs(eff.final().values - ref.final().values)) <= 1e-3


def test_effective_solve_refinement_differences_decrease():
    ts = benchmark_two_scale()
    finals = {n: solve_effective(ts, Grid.uniform(n), 0.1, GY).final().values for n in (8, 16, 32)}
    d1 = np.max(np.abs(finals[16][::2] - finals[8]))
    d2 = np.max(np.abs(finals[32][::2] - finals[16]))
    assert d2 < d1


def test_two_scale_with_y_independent_operator_stays_slow():
    ts = y_independent_two_scale()
    grid = Grid((16, 8))
    two = solve_two_scale(ts, 0.1, grid, 0.1)
    ref = solve_parabolic(ts.slow_operator(), Grid.uniform(16), T=0.1, initial=ts.initial(Grid.uniform(16)),
                          dt=two.dt)
    assert np.max(np.abs(two.final().values - ref.final().values[:, None])) <= 1e-8


def test_eps_one_is_the_unscaled_product_operator():
    ts = benchmark_two_scale()
    grid = Grid((16, 16))
    two = solve_two_scale(ts, 1.0, grid, 0.05)
    plain = HJBIOperator.from_text(
        [["0.6 + 0.2*cos(2*pi*x2)", "0"], ["0", "1 + 0.3*sin(2*pi*(x1 + x2))"]],
        ["a1*(1 + 0.5*cos(2*pi*x2))", "0.5*sin(2*pi*x2) + 0.5*b1"],
        "cos(2*pi*(x1 + x2)) + 0.5*sin(2*pi*x1)", A=[-1, 1], B=[-1, 1])
    ref = solve_parabolic(plain, grid, T=0.05, initial="sin(2*pi*x1)")
    assert np.max(np.abs(two.final().values - ref.final().values)) <= 1e-8


def test_tiny_eps_is_infeasible():
    with pytest.raises(InfeasibleError, match="eps"):
        solve_two_scale(benchmark_two_scale(), 1e-4, Grid((32, 64)), 0.1)


def test_convergence_study_single_eps_has_no_flag(tmp_path):
    table = convergence_study(benchmark_two_scale(), [0.2], Grid((16, 16)), 0.05, n_checkpoints=2)
    assert len(table.rows) == 1 and table.monotone is None
    table.to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().startswith("eps,sup_error")


def test_convergence_study_y_independent_errors_vanish():
    table = convergence_study(y_independent_two_scale(), [0.5, 0.25], Grid((16, 8)), 0.05, n_checkpoints=3,
                              shared_dt=True)
    assert max(table.errors) <= 1e-8


def test_convergence_study_rejects_increasing_eps():
    with pytest.raises(ConfigurationError, match="decreasing"):
        convergence_study(benchmark_two_scale(), [0.1, 0.2], Grid((8, 8)), 0.1)
