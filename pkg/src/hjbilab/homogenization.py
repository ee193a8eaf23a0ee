"""Two-scale operators, cell problems and the effective Hamiltonian.

A two-scale operator on slow variables x (dimension n) and fast variables y
(dimension m) is

    min_b max_a { -tr(M D2xx u) - tr(N D2yy u)/eps - 2 tr(E D2xy u)/sqrt(eps)
                  + G.Dx u + F.Dy u/eps + L }

with M = Xi Xi^T, N = Sigma Sigma^T, E = Sigma Xi^T. Freezing (x, p, X) in
the slow part gives the cell problem in y,

    min_b max_a { -tr(N D2yy v) + F.Dy v + [-tr(M X) + G.p + L] } = Hbar,

whose ergodic constant is the effective Hamiltonian Hbar(x, p, X). With the
sign convention of ``ergodic``, a y-independent operator has Hbar equal to
the min-max of its payoffs.

Discrete cell problems are solved as discounted problems with a tiny
discount (default 1e-7) by policy iteration, in shifted variables so that
the discount does not spoil the conditioning of the ergodic constant.
"""

from __future__ import annotations

import csv
import fcntl
import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import expressions as ex
from .discretization import DiscreteOperator, Grid, GridFunction, cfl_timestep
from .ergodic import _policy_solve
from .errors import ConfigurationError, EllipticityError, InfeasibleError
from .operator_model import (MATRIX, SCALAR, VECTOR, CoefficientField, ControlSet, HJBIOperator, Modulus,
                             _control_env, _pair_quotients, sample_pairs, torus_distance)
from .parabolic import ParabolicTrajectory, explicit_march, solve_parabolic

logger = logging.getLogger(__name__)

CELL_DISCOUNT = 1e-7
DT_FLOOR = 1e-7


# --------------------------------------------------------------------------
# two-scale operator


@dataclass(frozen=True)
class TwoScaleOperator:
    """Coefficients of a two-scale min-max operator.

    ``Xi`` is n x p (slow dispersion), ``Sigma`` is m x p (fast
    dispersion), ``G`` the slow drift (n), ``F`` the fast drift (m), ``L``
    the running cost and ``h`` the initial datum (a function of x only).
    ``nu`` is the declared lower bound of M and N.
    """

    n: int
    m: int
    p_dim: int
    Xi: CoefficientField
    Sigma: CoefficientField
    G: CoefficientField
    F: CoefficientField
    L: CoefficientField
    h: CoefficientField
    A: ControlSet
    B: ControlSet
    nu: float = 0.0
    name: str = ""

    def __post_init__(self):
        checks = (
            ("Xi", self.Xi, MATRIX, (self.n, self.p_dim)),
            ("Sigma", self.Sigma, MATRIX, (self.m, self.p_dim)),
            ("G", self.G, VECTOR, (self.n,)),
            ("F", self.F, VECTOR, (self.m,)),
            ("L", self.L, SCALAR, ()),
            ("h", self.h, SCALAR, ()),
        )
        allowed = self.allowed_variables()
        for label, fld, kind, shape in checks:
            if fld.kind != kind or fld.shape != shape:
                raise ConfigurationError(f"{label} must be a {kind} of shape {shape}, got {fld.kind} {fld.shape}")
            bad = sorted(fld.variables() - (self._x_names() if label == "h" else allowed))
            if bad:
                raise ConfigurationError(f"{label} uses undefined variable(s) {', '.join(bad)}")
        if self.nu < 0:
            raise ConfigurationError("nu must be nonnegative")

    @classmethod
    def from_text(cls, Xi, Sigma, G, F, L, h="0", A=None, B=None, nu=0.0, name=""):
        xi = CoefficientField.matrix(Xi)
        sg = CoefficientField.matrix(Sigma)
        if xi.shape[1] != sg.shape[1]:
            raise ConfigurationError(f"Xi and Sigma need the same number of noise columns, got "
                                     f"{xi.shape[1]} and {sg.shape[1]}")
        A = A if isinstance(A, ControlSet) else (ControlSet.singleton("A") if A is None else ControlSet(A, "A"))
        B = B if isinstance(B, ControlSet) else (ControlSet.singleton("B") if B is None else ControlSet(B, "B"))
        return cls(xi.shape[0], sg.shape[0], xi.shape[1], xi, sg, CoefficientField.vector(G),
                   CoefficientField.vector(F), CoefficientField.scalar(L), CoefficientField.scalar(h),
                   A, B, float(nu), name)

    def _x_names(self):
        return frozenset(f"x{i + 1}" for i in range(self.n))

    def allowed_variables(self):
        names = set(self._x_names()) | {f"y{k + 1}" for k in range(self.m)}
        names |= {f"a{k + 1}" for k in range(self.A.dim)} | {f"b{k + 1}" for k in range(self.B.dim)}
        return frozenset(names)

    def replace(self, **changes):
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for key, val in changes.items():
            if key in ("Xi", "Sigma") and not isinstance(val, CoefficientField):
                val = CoefficientField.matrix(val)
            elif key in ("G", "F") and not isinstance(val, CoefficientField):
                val = CoefficientField.vector(val)
            elif key in ("L", "h") and not isinstance(val, CoefficientField):
                val = CoefficientField.scalar(val)
            kw[key] = val
        kw["p_dim"] = kw["Xi"].shape[1]
        return TwoScaleOperator(**kw)

    def sample(self, points):
        """Coefficients at product points (npts x (n+m)) for every control pair."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.n + self.m)
        base = (len(self.A), len(self.B), pts.shape[0])
        env = _control_env(self.A, self.B)
        for i in range(self.n):
            env[f"x{i + 1}"] = pts[:, i][None, None, :]
        for k in range(self.m):
            env[f"y{k + 1}"] = pts[:, self.n + k][None, None, :]
        out = {name: getattr(self, name).evaluate(env, base) for name in ("Xi", "Sigma", "G", "F", "L")}
        for name, arr in out.items():
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"{name} is not finite on the samples")
        return out

    def structure_matrices(self, points):
        """M, N, E at product points, shapes (nA, nB, npts, ., .)."""
        s = self.sample(points)
        M = np.einsum("...ik,...jk->...ij", s["Xi"], s["Xi"])
        N = np.einsum("...ik,...jk->...ij", s["Sigma"], s["Sigma"])
        E = np.einsum("...ik,...jk->...ij", s["Sigma"], s["Xi"])
        return M, N, E

    def initial(self, grid_x: Grid):
        return GridFunction.from_expression(grid_x, self.h.exprs[()])

    def product_operator(self, eps: float = 1.0) -> HJBIOperator:
        """The (n+m)-dimensional operator with fast terms scaled by 1/eps.

        y_k becomes x_{n+k}. At eps = 1 no scaling factor is inserted, so
        the result is literally the unscaled operator.
        """
        if eps <= 0:
            raise ConfigurationError(f"eps must be positive, got {eps}")
        ren = {f"y{k + 1}": ex.Var(f"x{self.n + k + 1}") for k in range(self.m)}
        root = 1.0 / np.sqrt(eps)
        rows = [[e.substitute(ren) for e in row] for row in self.Xi.exprs]
        rows += [[ex.mul(root, e.substitute(ren)) for e in row] for row in self.Sigma.exprs]
        drift = [e.substitute(ren) for e in self.G.exprs] + [ex.mul(1.0 / eps, e.substitute(ren)) for e in self.F.exprs]
        return HJBIOperator(self.n + self.m, self.p_dim, CoefficientField.matrix(rows), CoefficientField.vector(drift),
                            CoefficientField.scalar(self.L.exprs[()].substitute(ren)), self.A, self.B,
                            name=f"{self.name or 'two-scale'} (eps={eps:g})")

    def slow_operator(self) -> HJBIOperator:
        """The slow operator (Xi, G, L) in x alone; only valid when nothing depends on y."""
        used = self.Xi.variables() | self.G.variables() | self.L.variables()
        if any(v.startswith("y") for v in used):
            raise ConfigurationError("slow_operator needs Xi, G and L independent of y")
        return HJBIOperator(self.n, self.p_dim, self.Xi, self.G, self.L, self.A, self.B, name=self.name)

    def is_y_independent(self):
        fields = (self.Xi, self.Sigma, self.G, self.F, self.L)
        return not any(v.startswith("y") for f in fields for v in f.variables())

    def check_periodicity(self, n_samples=64, seed=0, tol=1e-9):
        """Sampled check that every coefficient is 1-periodic in each y_k."""
        rng = np.random.default_rng(seed)
        pts = rng.random((n_samples, self.n + self.m))
        base = self.sample(pts)
        for k in range(self.m):
            shifted = pts.copy()
            shifted[:, self.n + k] += 1.0
            other = self.sample(shifted)
            for name in base:
                gap = float(np.max(np.abs(base[name] - other[name])))
                if gap > tol:
                    return False, f"{name} is not periodic in y{k + 1} (gap {gap:.3g})"
        return True, ""

    def check_ellipticity(self, grid: Grid):
        """Raise EllipticityError unless M >= nu I and N >= nu I on the product grid."""
        M, N, _ = self.structure_matrices(grid.points())
        for label, mat in (("M", M), ("N", N)):
            lo = float(np.min(np.linalg.eigvalsh(mat)))
            if lo < self.nu - 1e-12 or lo <= 0.0:
                raise EllipticityError(
                    f"{label} has smallest sampled eigenvalue {lo:.4g} below nu = {self.nu:g}; "
                    "the comparison principle for the effective problem needs M, N >= nu I with nu > 0"
                )

    def fingerprint(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def to_dict(self):
        return {
            "name": self.name, "slow_dim": self.n, "fast_dim": self.m, "noise_dim": self.p_dim,
            "Xi": self.Xi.to_text(), "Sigma": self.Sigma.to_text(), "G": self.G.to_text(),
            "F": self.F.to_text(), "L": self.L.to_text(), "h": self.h.to_text(), "nu": self.nu,
            "controls": {"A": self.A.points.tolist(), "B": self.B.points.tolist()},
        }


# --------------------------------------------------------------------------
# cell problems


@dataclass(frozen=True)
class CellProblem:
    x_bar: np.ndarray
    p_bar: np.ndarray
    X_bar: np.ndarray
    cell_operator: HJBIOperator
    omega: Modulus


def _frozen(ts, x_bar, p_bar, X_bar):
    x_bar = np.atleast_1d(np.asarray(x_bar, dtype=float)).reshape(ts.n)
    p_bar = np.atleast_1d(np.asarray(p_bar, dtype=float)).reshape(ts.n)
    X_bar = np.atleast_2d(np.asarray(X_bar, dtype=float)).reshape(ts.n, ts.n)
    return x_bar, p_bar, X_bar


def cell_cost_expression(ts: TwoScaleOperator, x_bar, p_bar, X_bar):
    """-tr(M X) + p.G + L with x frozen, as an expression in y and the controls."""
    x_bar, p_bar, X_bar = _frozen(ts, x_bar, p_bar, X_bar)
    xi = ts.Xi.exprs
    terms = []
    for i in range(ts.n):
        for j in range(ts.n):
            if X_bar[j, i] != 0.0:
                m_ij = ex.add(*[ex.mul(xi[i, k], xi[j, k]) for k in range(ts.p_dim)])
                terms.append(ex.mul(-X_bar[j, i], m_ij))
    for i in range(ts.n):
        if p_bar[i] != 0.0:
            terms.append(ex.mul(p_bar[i], ts.G.exprs[i]))
    terms.append(ts.L.exprs[()])
    freeze = {f"x{i + 1}": ex.Num(float(x_bar[i])) for i in range(ts.n)}
    return ex.add(*terms).substitute(freeze)


def build_cell_operator(ts: TwoScaleOperator, x_bar, p_bar, X_bar, n_samples: int = 64) -> CellProblem:
    """Cell operator in y with sigma = Sigma(x, .), f = F(x, .), l = -tr(M X) + p.G + L.

    The modulus of the cell cost is [C_M |X| + C_G |p|] r + omega_L(r) with
    sampled Lipschitz constants (in y) of M, G and L at the frozen x.
    Raises EllipticityError when N < nu on the samples.
    """
    x_bar, p_bar, X_bar = _frozen(ts, x_bar, p_bar, X_bar)
    freeze = {f"x{i + 1}": ex.Num(float(x_bar[i])) for i in range(ts.n)}
    cell = HJBIOperator(
        ts.m, ts.p_dim, ts.Sigma.substitute(freeze), ts.F.substitute(freeze),
        CoefficientField.scalar(cell_cost_expression(ts, x_bar, p_bar, X_bar)),
        ts.A, ts.B, name=f"cell at x={x_bar.tolist()}", state_prefix="y",
    )
    ys = Grid.uniform(max(4, int(round(n_samples ** (1.0 / ts.m)))), ts.m).points()
    pts = np.concatenate([np.broadcast_to(x_bar, (ys.shape[0], ts.n)), ys], axis=1)
    M, N, _ = ts.structure_matrices(pts)
    lo = float(np.min(np.linalg.eigvalsh(N)))
    if lo < ts.nu - 1e-12 or lo <= 0.0:
        raise EllipticityError(f"fast diffusion N has eigenvalue {lo:.4g} < nu = {ts.nu:g} at x = {x_bar.tolist()}")
    s = ts.sample(pts)
    i, j = sample_pairs(ys.shape[0])
    c_m, _ = _pair_quotients(M.reshape(M.shape[:3] + (-1,)), ys, i, j)
    c_g, _ = _pair_quotients(s["G"], ys, i, j)
    c_l, _ = _pair_quotients(s["L"][..., None], ys, i, j)
    slope = c_m * float(np.linalg.norm(X_bar)) + c_g * float(np.linalg.norm(p_bar))
    return CellProblem(x_bar, p_bar, X_bar, cell, Modulus.linear(slope) + Modulus.linear(c_l))


def _cell_constants(fast: DiscreteOperator, ell, y_axes, delta=CELL_DISCOUNT, state=None, lu_cache=None):
    """Ergodic constants of independent cell problems stacked along the non-y axes.

    ``fast`` carries only y-offsets, so its policy matrices are block
    diagonal. Returns (U with size-1 y axes, state for warm starts, residual).
    """
    if state is None:
        c = ell.max(axis=0).min(axis=0).mean(axis=y_axes, keepdims=True)
        z = np.zeros(fast.grid.shape)
    else:
        c, z = state
    res = 0.0
    for _ in range(2):
        z, _, res, _ = _policy_solve(fast, delta, ell - c, z, 0.0, 200, lu_cache)
        mean = z.mean(axis=y_axes, keepdims=True)
        c = c - delta * mean
        z = z - mean
    if lu_cache is not None and len(lu_cache) > 64:
        lu_cache.clear()
    return c, (c, z), res


class EffectiveHamiltonianCache:
    """Memo of Hbar values keyed by quantized (x, p, X).

    The first value stored under a key wins; later lookups return it
    bit-identically. With a ``path`` every insertion is appended as a JSON
    line (under an advisory file lock) and existing records are loaded.
    """

    def __init__(self, step: float = 1e-3, path=None, x_step: float | None = None):
        if step <= 0:
            raise ConfigurationError("quantization step must be positive")
        self.step = float(step)
        self.x_step = float(x_step or step)
        self.path = Path(path) if path is not None else None
        self._data = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path is not None and self.path.exists():
            self.load()

    def key(self, x_bar, p_bar, X_bar):
        xq = np.rint(np.asarray(x_bar, dtype=float).ravel() / self.x_step).astype(np.int64)
        pq = np.rint(np.asarray(p_bar, dtype=float).ravel() / self.step).astype(np.int64)
        Xq = np.rint(np.asarray(X_bar, dtype=float).ravel() / self.step).astype(np.int64)
        return tuple(xq.tolist()), tuple(pq.tolist()), tuple(Xq.tolist())

    def __len__(self):
        return len(self._data)

    def __contains__(self, key):
        return key in self._data

    def get(self, key):
        rec = self._data.get(key)
        return None if rec is None else rec["value"]

    def put(self, key, value, diagnostics=None):
        """Insert unless present; returns the stored value."""
        with self._lock:
            if key in self._data:
                return self._data[key]["value"]
            rec = {"key": [list(k) for k in key], "value": float(value), "diagnostics": diagnostics or {}}
            self._data[key] = rec
            if self.path is not None:
                with open(self.path, "a") as fh:
                    fcntl.flock(fh, fcntl.LOCK_EX)
                    fh.write(json.dumps(rec) + "\n")
                    fcntl.flock(fh, fcntl.LOCK_UN)
            return rec["value"]

    def load(self):
        with open(self.path) as fh:
            fcntl.flock(fh, fcntl.LOCK_SH)
            lines = fh.read().splitlines()
            fcntl.flock(fh, fcntl.LOCK_UN)
        for line in lines:
            if not line.strip():
                continue
            rec = json.loads(line)
            key = tuple(tuple(k) for k in rec["key"])
            self._data.setdefault(key, rec)


def effective_hamiltonian(ts: TwoScaleOperator, x_bar, p_bar, X_bar, cache: EffectiveHamiltonianCache | None = None,
                          grid_y: Grid | None = None, delta: float = CELL_DISCOUNT) -> float:
    """Hbar(x, p, X): the ergodic constant of the discrete cell problem."""
    grid_y = grid_y or Grid.uniform(64, ts.m)
    key = None
    if cache is not None:
        key = cache.key(x_bar, p_bar, X_bar)
        hit = cache.get(key)
        if hit is not None:
            cache.hits += 1
            return hit
        cache.misses += 1
    cell = build_cell_operator(ts, x_bar, p_bar, X_bar)
    try:
        dop = DiscreteOperator.from_operator(cell.cell_operator, grid_y)
        c, _, res = _cell_constants(dop, dop.ell, tuple(range(ts.m)), delta)
    except Exception as exc:
        raise type(exc)(f"cell problem at x={cell.x_bar.tolist()}, p={cell.p_bar.tolist()}, "
                        f"X={cell.X_bar.tolist()}: {exc}") from exc
    value = float(c.ravel()[0])
    if cache is not None:
        return cache.put(key, value, {"residual": res, "grid_y": list(grid_y.sizes)})
    return value


# --------------------------------------------------------------------------
# structure condition


@dataclass
class StructureReport:
    passed: bool
    K_bar: float
    C: float
    n_pairs: int
    worst: dict
    ratios: list = field(repr=False, default_factory=list)


def _random_triples(ts, count, rng, p_scale=1.0, X_scale=1.0, dx=0.05):
    out = []
    for _ in range(count):
        x1 = rng.random(ts.n)
        x2 = (x1 + dx * rng.uniform(-1, 1, ts.n)) % 1.0
        p1 = p_scale * rng.uniform(-1, 1, ts.n)
        p2 = p1 + 0.2 * p_scale * rng.uniform(-1, 1, ts.n)
        S1 = rng.uniform(-1, 1, (ts.n, ts.n))
        S2 = rng.uniform(-1, 1, (ts.n, ts.n))
        X1 = X_scale * (S1 + S1.T) / 2
        X2 = X1 + 0.2 * X_scale * (S2 + S2.T) / 2
        out.append(((x1, p1, X1), (x2, p2, X2)))
    return out


def effective_structure_check(ts: TwoScaleOperator, samples=12, cache: EffectiveHamiltonianCache | None = None,
                              grid_y: Grid | None = None, sample_grid: Grid | None = None,
                              seed: int = 0) -> StructureReport:
    """Fit the smallest K making every sampled pair satisfy the structure inequality

        |Hbar1 - Hbar2| <= C |X1 - X2| + C |p1 - p2| + wbar(|x1 - x2|)
                           + K |x1 - x2| (1 + max|p| + max|X|)

    with wbar(r) = omega_L(C_Sigma r) + omega_L(r). ``samples`` is a list
    of ((x1, p1, X1), (x2, p2, X2)) pairs or a count of random pairs
    (at least 10). Raises EllipticityError when M or N drop below nu.
    """
    grid_y = grid_y or Grid.uniform(32, ts.m)
    sample_grid = sample_grid or Grid.uniform(16, ts.n + ts.m)
    ts.check_ellipticity(sample_grid)
    if isinstance(samples, int):
        samples = _random_triples(ts, samples, np.random.default_rng(seed))
    samples = list(samples)
    if len(samples) < 10:
        raise ConfigurationError(f"structure check needs at least 10 pairs, got {len(samples)}")

    pts = sample_grid.points()
    M, _, _ = ts.structure_matrices(pts)
    s = ts.sample(pts)
    C = float(max(np.max(np.linalg.norm(M, axis=(-2, -1))), np.max(np.linalg.norm(s["G"], axis=-1))))
    xs = pts[:, :ts.n]
    i, j = sample_pairs(pts.shape[0], 50_000, seed)
    # Lipschitz constants in x along pairs sharing y
    same_y = np.all(np.isclose(pts[i, ts.n:], pts[j, ts.n:]), axis=1)
    i, j = i[same_y], j[same_y]
    c_sigma, _ = _pair_quotients(s["Sigma"].reshape(s["Sigma"].shape[:3] + (-1,)), xs, i, j) if i.size else (0.0, None)
    c_l, _ = _pair_quotients(s["L"][..., None], xs, i, j) if i.size else (0.0, None)
    omega_l = Modulus.linear(c_l)

    def wbar(r):
        return omega_l(c_sigma * r) + omega_l(r)

    K, worst, ratios, ok = 0.0, {}, [], True
    for (x1, p1, X1), (x2, p2, X2) in samples:
        h1 = effective_hamiltonian(ts, x1, p1, X1, cache, grid_y)
        h2 = effective_hamiltonian(ts, x2, p2, X2, cache, grid_y)
        r = float(torus_distance(np.asarray(x1, float), np.asarray(x2, float)))
        lhs = abs(h1 - h2)
        base = C * float(np.linalg.norm(np.asarray(X1) - np.asarray(X2))) \
            + C * float(np.linalg.norm(np.asarray(p1) - np.asarray(p2))) + wbar(r)
        weight = r * (1 + max(np.linalg.norm(p1), np.linalg.norm(p2)) + max(np.linalg.norm(X1), np.linalg.norm(X2)))
        excess = lhs - base - 1e-9
        if excess <= 0:
            ratios.append(0.0)
            continue
        if weight == 0.0:
            ok = False
            worst = {"x1": list(map(float, np.ravel(x1))), "excess": excess, "reason": "no x-separation to absorb"}
            continue
        q = excess / weight
        ratios.append(q)
        if q > K:
            K = q
            worst = {"x1": list(map(float, np.ravel(x1))), "x2": list(map(float, np.ravel(x2))),
                     "lhs": lhs, "base": base, "weight": weight}
    return StructureReport(ok and np.isfinite(K), K if ok else float("inf"), C, len(samples), worst, ratios)


# --------------------------------------------------------------------------
# effective and two-scale solves


def _product_coefficients(ts, grid, slow: bool):
    s = ts.sample(grid.points())
    nA, nB, N = s["L"].shape
    n, m, p = ts.n, ts.m, ts.p_dim
    sigma = np.zeros((nA, nB, N, n + m, p))
    f = np.zeros((nA, nB, N, n + m))
    if slow:
        sigma[..., :n, :] = s["Xi"]
        f[..., :n] = s["G"]
        ell = s["L"]
    else:
        sigma[..., n:, :] = s["Sigma"]
        f[..., n:] = s["F"]
        ell = np.zeros_like(s["L"])
    return sigma, f, ell


@dataclass(eq=False)
class EffectiveSolver:
    """Nodewise Hbar_h on a slow grid, batched over all slow nodes.

    The cell cost at slow node x_j is the slow monotone stencil applied to
    u at x_j plus L, so that the scheme reduces to ``solve_parabolic`` of
    the slow operator when nothing depends on y.
    """

    ts: TwoScaleOperator
    grid_x: Grid
    grid_y: Grid
    delta: float = CELL_DISCOUNT

    def __post_init__(self):
        if self.grid_x.n != self.ts.n or self.grid_y.n != self.ts.m:
            raise ConfigurationError("grid dimensions do not match the two-scale operator")
        self.product = Grid(self.grid_x.sizes + self.grid_y.sizes)
        self.slow = DiscreteOperator.from_coefficients(self.product, *_product_coefficients(self.ts, self.product, True))
        self.fast = DiscreteOperator.from_coefficients(self.product, *_product_coefficients(self.ts, self.product, False))
        self.y_axes = tuple(range(self.ts.n, self.ts.n + self.ts.m))
        self._state = None
        self._lu = {}
        self.calls = 0

    def timestep(self, safety=0.9):
        return cfl_timestep(self.slow, safety=safety)

    def __call__(self, u):
        """Hbar_h at every slow node for the slow grid function u."""
        self.calls += 1
        U = np.broadcast_to(np.asarray(u, dtype=float).reshape(self.grid_x.shape + (1,) * self.ts.m),
                            self.product.shape)
        ell = self.slow.payoffs(U)
        c, self._state, _ = _cell_constants(self.fast, ell, self.y_axes, self.delta, self._state, self._lu)
        return c.reshape(self.grid_x.shape)


def solve_effective(ts: TwoScaleOperator, grid_x: Grid, T: float, grid_y: Grid | None = None,
                    store_every: int = 1, save_times=(), dt: float | None = None,
                    delta: float = CELL_DISCOUNT) -> ParabolicTrajectory:
    """Explicit solve of u_t + Hbar_h(x, u) = 0 with u(0) = h.

    The step is limited by the slow stencil coefficients (sup over y and the
    controls), which bounds the sensitivity of Hbar_h to the nodal values.
    """
    grid_y = grid_y or Grid.uniform(32, ts.m)
    ts.check_ellipticity(Grid(grid_x.sizes + grid_y.sizes))
    solver = EffectiveSolver(ts, grid_x, grid_y, delta)
    dt_cfl = solver.timestep()
    if dt is None:
        dt = dt_cfl
    elif dt > dt_cfl * (1 + 1e-12):
        raise ConfigurationError(f"dt = {dt:.3g} exceeds the effective monotonicity limit {dt_cfl:.3g}")
    u0 = ts.initial(grid_x).values

    def step(u, s):
        return u - s * solver(u)

    times, layers, k = explicit_march(step, u0, T, dt, store_every, save_times)
    meta = {"kind": "effective", "grid_y": list(grid_y.sizes), "cell_discount": delta, "cell_solves": solver.calls}
    return ParabolicTrajectory(grid_x, times, layers, dt, k, None, meta)


def solve_two_scale(ts: TwoScaleOperator, eps: float, grid: Grid, T: float, store_every: int = 1,
                    save_times=(), dt_floor: float = DT_FLOOR) -> ParabolicTrajectory:
    """Direct monotone solve of the eps-scaled problem on the (x, y) product grid.

    The initial datum is h(x), constant in y. Raises InfeasibleError when
    the stable step falls below ``dt_floor``.
    """
    if grid.n != ts.n + ts.m:
        raise ConfigurationError(f"product grid must have dimension {ts.n + ts.m}, got {grid.n}")
    op = ts.product_operator(eps)
    dop = DiscreteOperator.from_operator(op, grid)
    dt = cfl_timestep(dop)
    if dt < dt_floor:
        raise InfeasibleError(
            f"stable step {dt:.3g} is below the floor {dt_floor:.3g} at eps = {eps:g} on grid {grid.sizes}; "
            "use a larger eps, a coarser fast grid, or lower the floor"
        )
    gx = Grid(grid.sizes[:ts.n])
    h = ts.initial(gx).values.reshape(gx.shape + (1,) * ts.m)
    u0 = np.broadcast_to(h, grid.shape)
    traj = solve_parabolic(dop, T=T, initial=np.array(u0), store_every=store_every, save_times=save_times)
    traj.operator = op
    traj.meta.update({"kind": "two_scale", "eps": eps})
    return traj


@dataclass
class ConvergenceTable:
    rows: list

    @property
    def eps(self):
        return [r["eps"] for r in self.rows]

    @property
    def errors(self):
        return [r["error"] for r in self.rows]

    @property
    def monotone(self):
        """True/False for strictly decreasing errors; None with a single row."""
        if len(self.rows) < 2:
            return None
        e = self.errors
        return all(b < a for a, b in zip(e, e[1:]))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "sup_error", "grid", "dt", "steps"])
            for r in self.rows:
                w.writerow([repr(r["eps"]), repr(r["error"]), "x".join(map(str, r["grid"])), repr(r["dt"]), r["steps"]])


def convergence_study(ts: TwoScaleOperator, eps_list, grids, T: float, n_checkpoints: int = 10,
                      dt_floor: float = DT_FLOOR, shared_dt: bool = False) -> ConvergenceTable:
    """Sup errors |u^eps - u| over checkpoint times in (0, T], every x and y.

    ``grids`` is one product grid or one per eps. The effective solution
    is computed once per distinct slow grid with its own step, landing on
    the same checkpoints. With ``shared_dt`` it is recomputed for every eps
    with the two-scale step instead, so that the table carries no
    time-discretization mismatch (costly for small eps).
    """
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigurationError(f"eps list must be strictly decreasing, got {eps_list}")
    if isinstance(grids, Grid):
        grids = [grids] * len(eps_list)
    if len(grids) != len(eps_list):
        raise ConfigurationError("need one product grid per eps")
    checkpoints = [T * (k + 1) / n_checkpoints for k in range(n_checkpoints)]
    effective = {}
    rows = []
    for eps, grid in zip(eps_list, grids):
        gx, gy = Grid(grid.sizes[:ts.n]), Grid(grid.sizes[ts.n:])
        two = solve_two_scale(ts, eps, grid, T, store_every=10**9, save_times=checkpoints, dt_floor=dt_floor)
        if shared_dt:
            eff = solve_effective(ts, gx, T, gy, store_every=10**9, save_times=checkpoints, dt=two.dt)
        else:
            if gx.sizes + gy.sizes not in effective:
                effective[gx.sizes + gy.sizes] = solve_effective(ts, gx, T, gy, store_every=10**9,
                                                                 save_times=checkpoints)
            eff = effective[gx.sizes + gy.sizes]
        err = 0.0
        for t in checkpoints:
            ue = eff.at(t).values.reshape(gx.shape + (1,) * ts.m)
            err = max(err, float(np.max(np.abs(two.at(t).values - ue))))
        rows.append({"eps": eps, "error": err, "grid": list(grid.sizes), "dt": two.dt, "steps": two.steps,
                     "effective_dt": eff.dt})
        logger.info("eps=%g  sup error %.4g", eps, err)
    return ConvergenceTable(rows)
