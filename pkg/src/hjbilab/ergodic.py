"""Discounted problems  delta*w + H_h(w) = 0  and the ergodic constant.

Sign convention: U is the constant for which H(x, Dv, D^2v) = U has a
periodic solution v. Hence U = -lim delta*w_delta = -lim u(t, .)/t, and a
constant running cost l = c gives U = c.

Discounted solves work in shifted variables: for a guess c of U the
function z = w + c/delta solves  delta*z + H_h(z; l - c) = 0, which stays
O(1) as delta -> 0 and keeps round-off under control.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla

from .discretization import DiscreteOperator, Grid, GridFunction, cfl_timestep, seminorm_hoelder
from .errors import ConfigurationError, ConvergenceError, InconclusiveError
from .operator_model import HJBIOperator
from .parabolic import _discrete, long_time_slope, solve_parabolic

logger = logging.getLogger(__name__)

DEFAULT_SCHEDULE = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)
DEFAULT_TOL = 1e-9
EXPLICIT_MAX_ITER = 1_000_000


@dataclass(eq=False)
class DiscountedSolve:
    """Solution of delta*w + H_h(w) = 0.

    ``z`` holds w + shift/delta, the numerically well-scaled representation.
    """

    delta: float
    z: np.ndarray
    shift: float
    grid: Grid
    iterations: int
    residual: float
    method: str
    ell_sup: float
    history: list = field(default_factory=list, repr=False)

    @property
    def w(self):
        return GridFunction(self.grid, self.z - self.shift / self.delta)

    def corrector(self, node=0):
        return GridFunction(self.grid, self.z - self.z.reshape(self.grid.shape)[self.grid.multi_index(node)])

    def ergodic_estimate(self, node=0):
        """-delta * w at ``node``."""
        return self.shift - self.delta * float(self.z.reshape(self.grid.shape)[self.grid.multi_index(node)])

    def scaled_sup(self):
        """delta * ||w||_inf."""
        return float(np.max(np.abs(self.delta * self.z - self.shift)))


def _roundoff_floor(dop, delta, z):
    return 8 * np.finfo(float).eps * (dop.budget.max() + delta + 1.0) * max(1.0, float(np.max(np.abs(z))))


def _keep_ties(old, new, values, better, eps):
    """Keep the old choice wherever it is within ``eps`` of the new one."""
    if old is None:
        return new
    v_old = np.take_along_axis(values, old[None], axis=0)[0]
    v_new = np.take_along_axis(values, new[None], axis=0)[0]
    stay = (v_old >= v_new - eps) if better == "max" else (v_old <= v_new + eps)
    return np.where(stay, old, new)


def _policy_solve(dop, delta, ell, z0, tol, max_iter, lu_cache=None):
    """Nested policy iteration for delta*z + min_b max_a L_ab z = 0.

    The outer loop improves the minimizer's policy; for each fixed b-policy
    the inner loop is Howard's algorithm for the maximizer. Every linear
    system is an M-matrix, so both loops are monotone and finite.
    Returns (z, linear_solves, residual, history).
    """
    shape = dop.grid.shape
    z = np.array(z0, dtype=float).reshape(shape)
    nA, nB = dop.n_controls
    # payoffs carry round-off of size eps * weights * |z|; treat such gaps as ties
    scale = max(1.0, float(np.max(np.abs(ell))), float(np.max(np.abs(z0))))
    eps = 1e-11 * (dop.budget.max() + 1.0) * scale
    history = []
    solves = 0
    ib = None
    ia = None

    def solve(ia, ib):
        key = None
        if lu_cache is not None:
            key = (ia.tobytes(), ib.tobytes())
            lu = lu_cache.get(key)
        else:
            lu = None
        if lu is None:
            lu = spla.splu(dop.matrix(ia, ib, delta))
            if lu_cache is not None:
                lu_cache[key] = lu
        rhs = -dop.select(ell, ia, ib).reshape(-1)
        return lu.solve(rhs).reshape(shape)

    for _ in range(max_iter):
        L = dop.payoffs(z, ell)
        upper = L.max(axis=0)
        ib_next = _keep_ties(ib, np.argmin(upper, axis=0), upper, "min", eps)
        if ib is not None and np.array_equal(ib_next, ib):
            break
        ib = ib_next
        fresh = True
        for _ in range(max_iter):
            Lb = np.take_along_axis(L, ib[None, None], axis=1)[:, 0]
            ia_next = _keep_ties(ia, np.argmax(Lb, axis=0), Lb, "max", eps)
            if not fresh and np.array_equal(ia_next, ia):
                break
            ia, fresh = ia_next, False
            z = solve(ia, ib)
            solves += 1
            L = dop.payoffs(z, ell)
        history.append(float(np.max(np.abs(delta * z + L.max(axis=0).min(axis=0)))))
    res = float(np.max(np.abs(delta * z + dop.hamiltonian(z, ell))))
    return z, solves, res, history


def _explicit_solve(dop, delta, ell, z0, tol, max_iter):
    """Damped fixed point z <- z - tau*(delta*z + H_h(z)), a (1 - tau*delta)-contraction."""
    tau = cfl_timestep(dop, discount=delta)
    z = np.array(z0, dtype=float).reshape(dop.grid.shape)
    history = []
    for k in range(1, max_iter + 1):
        r = delta * z + dop.hamiltonian(z, ell)
        res = float(np.max(np.abs(r)))
        if k % 1000 == 1:
            history.append(res)
        if res <= tol:
            return z, k - 1, res, history
        z = z - tau * r
    tail = ", ".join(f"{v:.3g}" for v in history[-5:])
    raise ConvergenceError(
        f"discounted iteration (delta = {delta:g}) did not reach tol {tol:g} in {max_iter} iterations; "
        f"residual history tail: {tail}"
    )


def solve_discounted(op, grid: Grid = None, delta: float = 1e-2, tol: float = DEFAULT_TOL,
                     method: str = "policy", initial=None, shift: float | None = None,
                     max_iter: int | None = None) -> DiscountedSolve:
    """Solve delta*w + H_h(w) = 0.

    method="policy" (default) runs nested policy iteration with sparse LU
    solves; method="explicit" runs the damped pseudo-time iteration with
    step from ``cfl_timestep(discount=delta)``. ``initial`` is a guess for
    w; ``shift`` a guess for U (both only affect speed, not the result).
    """
    if delta <= 0:
        raise ConfigurationError(f"discount must be positive, got {delta}")
    dop = _discrete(op, grid)
    grid = dop.grid
    ell_sup = float(np.max(np.abs(dop.ell)))
    z0 = np.zeros(grid.shape)
    c = 0.0 if shift is None else float(shift)
    if initial is not None:
        w0 = initial.values if isinstance(initial, GridFunction) else np.asarray(initial, dtype=float)
        z0 = w0.reshape(grid.shape) + c / delta
    if method == "explicit":
        z, its, res, hist = _explicit_solve(dop, delta, dop.ell - c, z0, tol, max_iter or EXPLICIT_MAX_ITER)
    elif method == "policy":
        cap = max_iter or 200
        z, its, res, hist = _policy_solve(dop, delta, dop.ell - c, z0, tol, cap)
        if shift is None:
            # recentre on the current estimate of U and polish
            c_new = c - delta * float(np.mean(z))
            z1, its1, res, hist1 = _policy_solve(dop, delta, dop.ell - c_new, z + (c_new - c) / delta, tol, cap)
            z, c, its, hist = z1, c_new, its + its1, hist + hist1
        floor = _roundoff_floor(dop, delta, z)
        if res > max(tol, floor):
            raise ConvergenceError(
                f"policy iteration (delta = {delta:g}) stopped at residual {res:.3g} > tol {tol:g}; "
                f"residual history tail: {', '.join(f'{v:.3g}' for v in hist[-5:])}"
            )
    else:
        raise ConfigurationError(f"unknown method {method!r}; use 'policy' or 'explicit'")
    return DiscountedSolve(delta, z, c, grid, its, res, method, ell_sup, hist)


@dataclass(eq=False)
class ErgodicResult:
    U: float
    corrector: GridFunction
    method: str
    residual: float
    diagnostics: dict = field(default_factory=dict)
    solves: list = field(default_factory=list, repr=False)

    @property
    def signed_limits(self):
        """Both readings of the limit: -delta*w (= U) and +delta*w (= -U)."""
        return {"minus_limit": self.U, "plus_limit": -self.U}

    def to_dict(self):
        return {
            "U": self.U,
            "method": self.method,
            "residual": self.residual,
            "signed_limits": self.signed_limits,
            "diagnostics": _plain(self.diagnostics),
            "grid": list(self.corrector.grid.sizes),
        }

    def export(self, directory, fmt="binary"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        name = "corrector.csv" if fmt == "csv" else "corrector.bin"
        if fmt == "csv":
            self.corrector.to_csv(directory / name)
        else:
            self.corrector.to_binary(directory / name)
        d = self.to_dict()
        d["corrector_file"] = name
        (directory / "ergodic.json").write_text(json.dumps(d, indent=2))
        return [directory / name, directory / "ergodic.json"]


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def cell_residual(dop: DiscreteOperator, corrector: GridFunction, U: float) -> float:
    """sup over nodes of |H_h(corrector) - U|."""
    return float(np.max(np.abs(dop.hamiltonian(corrector.values) - U)))


def ergodic_vanishing_discount(op, grid: Grid = None, schedule=DEFAULT_SCHEDULE, tol: float = DEFAULT_TOL,
                               ref_node=0, method: str = "policy") -> ErgodicResult:
    """U = -delta*w_delta(ref) at the last discount of a decreasing schedule.

    Each solve is warm-started from the previous one. Diagnostics list the
    per-discount estimates, the node spread of delta*w, and a Richardson
    extrapolation in delta of the last two estimates.
    """
    schedule = [float(d) for d in schedule]
    if not schedule or any(d <= 0 for d in schedule):
        raise ConfigurationError("discount schedule must be a nonempty list of positive numbers")
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ConfigurationError(f"discount schedule must be strictly decreasing, got {schedule}")
    dop = _discrete(op, grid)
    solves = []
    prev = None
    for delta in schedule:
        if prev is None:
            s = solve_discounted(dop, delta=delta, tol=tol, method=method)
        else:
            c = prev.ergodic_estimate(ref_node)
            w0 = prev.z - prev.z.mean() - c / delta
            s = solve_discounted(dop, delta=delta, tol=tol, method=method, initial=w0, shift=c)
        solves.append(s)
        prev = s
    last = solves[-1]
    U = last.ergodic_estimate(ref_node)
    corrector = last.corrector(0)
    estimates = [s.ergodic_estimate(ref_node) for s in solves]
    spreads = [float(s.delta * (s.z.max() - s.z.min())) for s in solves]
    diag = {
        "schedule": schedule,
        "estimates": estimates,
        "delta_w_ref": [-e for e in estimates],
        "delta_w_spread": spreads,
        "iterations": [s.iterations for s in solves],
        "residuals": [s.residual for s in solves],
        "scaled_sup": [s.scaled_sup() for s in solves],
        "ref_node": list(dop.grid.multi_index(ref_node)),
    }
    if len(solves) >= 2:
        d0, d1 = schedule[-2], schedule[-1]
        e0, e1 = estimates[-2], estimates[-1]
        diag["richardson"] = (d0 * e1 - d1 * e0) / (d0 - d1)
    res = cell_residual(dop, corrector, U)
    diag["cell_residual"] = res
    return ErgodicResult(U, corrector, "vanishing_discount", res, diag, solves)


def ergodic_long_time(op, grid: Grid = None, T: float = 2.0, window: float = 0.5, threshold: float = 1e-3,
                      n_layers: int = 200) -> ErgodicResult:
    """U = -(mean slope of t -> u(t, x)) over the trailing window of a zero-datum solve.

    The corrector is u(T) + U*T normalized at node 0. Raises
    InconclusiveError when the nodal slopes spread more than ``threshold``.
    """
    dop = _discrete(op, grid)
    steps = T / cfl_timestep(dop)
    store_every = max(1, int(steps // n_layers))
    traj = solve_parabolic(dop, T=T, store_every=store_every)
    est = long_time_slope(traj, window, threshold)
    if est.flagged:
        raise InconclusiveError(
            f"long-time slopes spread by {est.spread:.3g} > {threshold:g} over t in "
            f"[{est.window[0]:.3g}, {est.window[1]:.3g}]; increase T"
        )
    U = -float(np.mean(est.slope))
    corrector = GridFunction(dop.grid, traj.values[-1] + U * traj.times[-1]).normalized(0)
    diag = {
        "T": T,
        "window": list(est.window),
        "spread": est.spread,
        "layers_in_window": est.n_layers,
        "dt": traj.dt,
        "u_over_t": float(np.mean(traj.values[-1]) / traj.times[-1]),
    }
    res = cell_residual(dop, corrector, U)
    diag["cell_residual"] = res
    return ErgodicResult(U, corrector, "long_time", res, diag)


@dataclass
class CorrectorRegularityReport:
    deltas: list
    seminorms: list
    ratio: float
    factor: float
    bounded: bool
    K_emp: float


def corrector_regularity_check(solves, factor: float = 1.5) -> CorrectorRegularityReport:
    """Lipschitz seminorms of the normalized correctors along a discount schedule.

    ``bounded`` holds when max/min of the seminorms is at most ``factor``.
    K_emp = max seminorm / (1 + max|l|).
    """
    solves = list(solves)
    if len(solves) < 2:
        raise ConfigurationError("need at least two discounted solves")
    semis = [seminorm_hoelder(s.corrector(0), 1.0) for s in solves]
    hi, lo = max(semis), min(semis)
    if hi == 0.0:
        ratio = 1.0
    elif lo == 0.0:
        ratio = float("inf")
    else:
        ratio = hi / lo
    ell_sup = max(s.ell_sup for s in solves)
    return CorrectorRegularityReport(
        [s.delta for s in solves], semis, ratio, factor, ratio <= factor, hi / (1.0 + ell_sup)
    )
