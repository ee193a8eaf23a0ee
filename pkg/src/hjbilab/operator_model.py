"""HJBI operators with finite control sets.

An operator is the min-max of linear second-order operators

    H(x, p, X) = min_{b in B} max_{a in A} { -tr(a(x,a,b) X) + f(x,a,b).p + l(x,a,b) }

with diffusion matrix ``a = sigma sigma^T`` (``sigma`` is n x p). The first
player (controls in A) maximizes and the second player (controls in B)
minimizes. Coefficients are expressions in the state components ``x1..xn``
and the control components ``a1..``, ``b1..``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import expressions as ex
from .errors import ConfigurationError, ExpressionError

MATRIX, VECTOR, SCALAR = "matrix", "vector", "scalar"


# --------------------------------------------------------------------------
# controls and coefficients


@dataclass(frozen=True)
class ControlSet:
    """Finite set of control values, each a point in R^d."""

    points: np.ndarray
    label: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 0:
            pts = pts.reshape(1, 1)
        elif pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ConfigurationError(f"control set '{self.label}' must be a non-empty list of points")
        if not np.all(np.isfinite(pts)):
            raise ConfigurationError(f"control set '{self.label}' has non-finite entries")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def singleton(cls, label=""):
        return cls(np.zeros((1, 1)), label)

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def __eq__(self, other):
        return isinstance(other, ControlSet) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())


@dataclass(frozen=True)
class CoefficientField:
    """A matrix, vector or scalar field given by expressions.

    ``exprs`` is an object array of parsed expressions with shape ``shape``
    (``()`` for scalars).
    """

    kind: str
    exprs: np.ndarray
    periodic: bool = True

    @classmethod
    def scalar(cls, text, periodic=True):
        arr = np.empty((), dtype=object)
        arr[()] = ex.parse(text)
        return cls(SCALAR, arr, periodic)

    @classmethod
    def vector(cls, texts, periodic=True):
        texts = list(texts)
        arr = np.empty(len(texts), dtype=object)
        for i, t in enumerate(texts):
            arr[i] = ex.parse(t)
        return cls(VECTOR, arr, periodic)

    @classmethod
    def matrix(cls, rows, periodic=True):
        rows = [list(r) for r in rows]
        if not rows or any(len(r) != len(rows[0]) for r in rows):
            raise ConfigurationError("matrix coefficient must be a rectangular list of rows")
        arr = np.empty((len(rows), len(rows[0])), dtype=object)
        for i, r in enumerate(rows):
            for j, t in enumerate(r):
                arr[i, j] = ex.parse(t)
        return cls(MATRIX, arr, periodic)

    @property
    def shape(self):
        return self.exprs.shape

    def variables(self):
        out = frozenset()
        for e in self.exprs.flat:
            out |= e.variables()
        return out

    def substitute(self, mapping):
        arr = np.empty(self.exprs.shape, dtype=object)
        for idx in np.ndindex(self.exprs.shape):
            arr[idx] = self.exprs[idx].substitute(mapping)
        return CoefficientField(self.kind, arr, self.periodic)

    def evaluate(self, env, base_shape):
        """Array of shape ``base_shape + self.shape``."""
        out = np.empty(tuple(base_shape) + self.shape)
        for idx in np.ndindex(self.exprs.shape):
            out[(Ellipsis,) + idx] = ex.evaluate(self.exprs[idx], env, base_shape)
        return out

    def to_text(self):
        if self.kind == SCALAR:
            return str(self.exprs[()])
        return np.vectorize(str, otypes=[object])(self.exprs).tolist()

    def __eq__(self, other):
        return (
            isinstance(other, CoefficientField)
            and self.kind == other.kind
            and self.shape == other.shape
            and self.to_text() == other.to_text()
        )

    def __hash__(self):
        return hash((self.kind, json.dumps(self.to_text())))


def _control_env(A: ControlSet, B: ControlSet):
    """Variables a_k, b_k with shape (nA, nB, 1) for broadcasting against points."""
    env = {}
    for k in range(A.dim):
        env[f"a{k + 1}"] = A.points[:, k][:, None, None]
    for k in range(B.dim):
        env[f"b{k + 1}"] = B.points[:, k][None, :, None]
    return env


def _as_points(points, n):
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1) if n == 1 else pts.reshape(1, -1)
    if pts.shape[1] != n:
        raise ConfigurationError(f"points have dimension {pts.shape[1]}, operator has {n}")
    return pts


# --------------------------------------------------------------------------
# operator


@dataclass(frozen=True)
class HJBIOperator:
    """Min-max operator with dispersion ``sigma`` (n x p), drift, running cost."""

    n: int
    p_dim: int
    sigma: CoefficientField
    drift: CoefficientField
    cost: CoefficientField
    A: ControlSet
    B: ControlSet
    name: str = ""
    state_prefix: str = "x"

    def __post_init__(self):
        if self.sigma.kind != MATRIX or self.sigma.shape != (self.n, self.p_dim):
            raise ConfigurationError(
                f"sigma must be a {self.n}x{self.p_dim} matrix, got shape {self.sigma.shape}"
            )
        if self.drift.kind != VECTOR or self.drift.shape != (self.n,):
            raise ConfigurationError(f"drift must be a vector of length {self.n}, got {self.drift.shape}")
        if self.cost.kind != SCALAR:
            raise ConfigurationError("cost must be a scalar field")
        allowed = self.allowed_variables()
        for label, fld in (("sigma", self.sigma), ("drift", self.drift), ("cost", self.cost)):
            bad = sorted(fld.variables() - allowed)
            if bad:
                raise ConfigurationError(
                    f"{label} uses variable(s) {', '.join(bad)} not defined for this operator "
                    f"(state dim {self.n}, |A| dim {self.A.dim}, |B| dim {self.B.dim})"
                )

    @classmethod
    def from_text(cls, sigma, drift, cost, A=None, B=None, name=""):
        """Build from nested lists of expression strings.

        ``sigma`` is a list of rows; ``A``/``B`` are point lists or
        ControlSets (default: singletons).
        """
        sig = CoefficientField.matrix(sigma)
        drf = CoefficientField.vector(drift)
        cst = CoefficientField.scalar(cost)
        A = A if isinstance(A, ControlSet) else (ControlSet.singleton("A") if A is None else ControlSet(A, "A"))
        B = B if isinstance(B, ControlSet) else (ControlSet.singleton("B") if B is None else ControlSet(B, "B"))
        n, p = sig.shape
        return cls(n, p, sig, drf, cst, A, B, name)

    def allowed_variables(self):
        names = {f"{self.state_prefix}{i + 1}" for i in range(self.n)}
        names |= {f"a{k + 1}" for k in range(self.A.dim)}
        names |= {f"b{k + 1}" for k in range(self.B.dim)}
        return frozenset(names)

    def replace(self, **changes):
        """Copy with some fields swapped; coefficient fields may be given as text."""
        kw = dict(
            n=self.n, p_dim=self.p_dim, sigma=self.sigma, drift=self.drift, cost=self.cost,
            A=self.A, B=self.B, name=self.name, state_prefix=self.state_prefix,
        )
        for key, val in changes.items():
            if key == "sigma" and not isinstance(val, CoefficientField):
                val = CoefficientField.matrix(val)
            elif key == "drift" and not isinstance(val, CoefficientField):
                val = CoefficientField.vector(val)
            elif key == "cost" and not isinstance(val, CoefficientField):
                val = CoefficientField.scalar(val)
            kw[key] = val
        if "sigma" in changes:
            kw["n"], kw["p_dim"] = kw["sigma"].shape
        return HJBIOperator(**kw)

    def _env(self, pts):
        env = _control_env(self.A, self.B)
        for i in range(self.n):
            env[f"{self.state_prefix}{i + 1}"] = pts[:, i][None, None, :]
        return env

    def sample(self, points):
        """Coefficients at ``points`` (npts x n) for every control pair.

        Returns ``(sigma, f, ell)`` with shapes (nA, nB, npts, n, p),
        (nA, nB, npts, n) and (nA, nB, npts).
        """
        pts = _as_points(points, self.n)
        base = (len(self.A), len(self.B), pts.shape[0])
        env = self._env(pts)
        sig = self.sigma.evaluate(env, base)
        f = self.drift.evaluate(env, base)
        ell = self.cost.evaluate(env, base)
        for label, arr in (("sigma", sig), ("drift", f), ("cost", ell)):
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"{label} of operator '{self.name}' is not finite on the samples")
        return sig, f, ell

    def fingerprint(self):
        """Stable hash of the operator definition."""
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self):
        return {
            "name": self.name,
            "dim": self.n,
            "noise_dim": self.p_dim,
            "controls": {
                "A": {"label": self.A.label, "points": self.A.points.tolist()},
                "B": {"label": self.B.label, "points": self.B.points.tolist()},
            },
            "sigma": self.sigma.to_text(),
            "drift": self.drift.to_text(),
            "cost": self.cost.to_text(),
        }


def _index_of(points, value, label):
    value = np.atleast_1d(np.asarray(value, dtype=float))
    hits = np.where(np.all(np.isclose(points, value[None, :]), axis=1))[0]
    if hits.size == 0:
        raise ConfigurationError(f"{value.tolist()} is not a point of control set {label}")
    return int(hits[0])


def diffusion(op: HJBIOperator, x, alpha, beta):
    """Diffusion matrix ``sigma sigma^T`` at one state and control pair."""
    ia = _index_of(op.A.points, alpha, "A")
    ib = _index_of(op.B.points, beta, "B")
    sig, _, _ = op.sample(np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, op.n))
    s = sig[ia, ib, 0]
    return s @ s.T


def payoff_table(op: HJBIOperator, x, p, X):
    """Values of the linear operators for every (alpha, beta), shape (nA, nB)."""
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, op.n)
    p = np.atleast_1d(np.asarray(p, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if p.shape != (op.n,) or X.shape != (op.n, op.n):
        raise ConfigurationError(f"gradient/Hessian must have shapes ({op.n},)/({op.n},{op.n})")
    sig, f, ell = op.sample(x)
    a = np.einsum("...ik,...jk->...ij", sig[:, :, 0], sig[:, :, 0])
    return -np.einsum("abij,ji->ab", a, X) + f[:, :, 0] @ p + ell[:, :, 0]


def minmax(table):
    """min over the column index of max over the row index; first index wins ties."""
    return float(np.min(np.max(table, axis=0)))


def evaluate_hamiltonian(op: HJBIOperator, x, p, X):
    """H(x, p, X) = min over B of max over A of the linear payoffs."""
    if len(op.A) == 0 or len(op.B) == 0:
        raise ConfigurationError("empty control set")
    return minmax(payoff_table(op, x, p, X))


def lower_value(op: HJBIOperator, x, p, X):
    """max over A of min over B; never exceeds evaluate_hamiltonian."""
    return float(np.max(np.min(payoff_table(op, x, p, X), axis=1)))


# --------------------------------------------------------------------------
# moduli and certificates


@dataclass(frozen=True)
class Modulus:
    """Modulus of continuity.

    kind is one of ``linear`` (params: L), ``hoelder`` (params: c, kappa),
    ``tabulated`` (params: radii, values; linear interpolation, extended
    with the last slope), ``sum`` / ``max`` (params: tuple of moduli).
    """

    kind: str = "linear"
    params: tuple = (0.0,)

    @classmethod
    def linear(cls, L):
        return cls("linear", (float(L),))

    @classmethod
    def hoelder(cls, c, kappa):
        return cls("hoelder", (float(c), float(kappa)))

    @classmethod
    def tabulated(cls, radii, values):
        r = tuple(float(v) for v in radii)
        w = tuple(float(v) for v in values)
        if len(r) != len(w) or len(r) < 2:
            raise ConfigurationError("tabulated modulus needs at least two (r, value) pairs")
        if r[0] != 0.0 or w[0] != 0.0:
            raise ConfigurationError("tabulated modulus must start at (0, 0)")
        if any(b <= a for a, b in zip(r, r[1:])) or any(b < a for a, b in zip(w, w[1:])):
            raise ConfigurationError("tabulated modulus must be increasing in r and nondecreasing in value")
        return cls("tabulated", (r, w))

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "linear":
            out = self.params[0] * r
        elif self.kind == "hoelder":
            c, kappa = self.params
            out = c * np.power(np.maximum(r, 0.0), kappa)
        elif self.kind == "tabulated":
            radii, values = (np.asarray(p) for p in self.params)
            slope = (values[-1] - values[-2]) / (radii[-1] - radii[-2])
            out = np.where(
                r <= radii[-1], np.interp(r, radii, values), values[-1] + slope * (r - radii[-1])
            )
        elif self.kind == "sum":
            out = sum(m(r) for m in self.params)
        elif self.kind == "max":
            out = np.maximum.reduce([np.asarray(m(r), dtype=float) for m in self.params])
        else:
            raise ConfigurationError(f"unknown modulus kind '{self.kind}'")
        return float(out) if np.ndim(out) == 0 else out

    def __add__(self, other):
        return Modulus("sum", (self, other))

    def maximum(self, other):
        if self.kind == "linear" and other.kind == "linear":
            return Modulus.linear(max(self.params[0], other.params[0]))
        return Modulus("max", (self, other))

    def to_dict(self):
        if self.kind in ("sum", "max"):
            return {self.kind: [m.to_dict() for m in self.params]}
        if self.kind == "tabulated":
            return {"tabulated": {"radii": list(self.params[0]), "values": list(self.params[1])}}
        if self.kind == "hoelder":
            return {"hoelder": {"c": self.params[0], "kappa": self.params[1]}}
        return {"linear": self.params[0]}

    @classmethod
    def from_dict(cls, spec):
        if isinstance(spec, (int, float)):
            return cls.linear(spec)
        if not isinstance(spec, dict) or len(spec) != 1:
            raise ConfigurationError("modulus must be a mapping with one of linear/hoelder/tabulated")
        (kind, val), = spec.items()
        if kind == "linear":
            return cls.linear(val)
        if kind == "hoelder":
            return cls.hoelder(val["c"], val["kappa"])
        if kind == "tabulated":
            return cls.tabulated(val["radii"], val["values"])
        if kind in ("sum", "max"):
            return cls(kind, tuple(cls.from_dict(v) for v in val))
        raise ConfigurationError(f"unknown modulus kind '{kind}'")


@dataclass(frozen=True)
class RegularityCertificate:
    """Declared (or estimated) constants of the standing hypotheses.

    C bounds the sup norms of sigma, f and l; C_sigma, C_f are Lipschitz
    constants of sigma and f in x; omega is a modulus of continuity of l in
    x; nu is a lower bound of the diffusion matrix (0 when degenerate);
    gamma and C_H describe a uniform Hoelder bound of the solutions.
    """

    C: float = 0.0
    C_sigma: float = 0.0
    C_f: float = 0.0
    omega: Modulus = field(default_factory=lambda: Modulus.linear(0.0))
    nu: float = 0.0
    gamma: float | None = None
    C_H: float | None = None
    source: str = "declared"

    def __post_init__(self):
        for name in ("C", "C_sigma", "C_f", "nu"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"certificate field {name} must be nonnegative")
        if self.gamma is not None and not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in (0, 1], got {self.gamma}")

    def combine(self, other: "RegularityCertificate") -> "RegularityCertificate":
        """Componentwise max, valid for both operators of a pair."""

        def opt_max(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return max(a, b)

        gamma = None
        if self.gamma is not None and other.gamma is not None:
            gamma = min(self.gamma, other.gamma)
        else:
            gamma = self.gamma if other.gamma is None else other.gamma
        return RegularityCertificate(
            C=max(self.C, other.C),
            C_sigma=max(self.C_sigma, other.C_sigma),
            C_f=max(self.C_f, other.C_f),
            omega=self.omega.maximum(other.omega),
            nu=min(self.nu, other.nu),
            gamma=gamma,
            C_H=opt_max(self.C_H, other.C_H),
            source=self.source if self.source == other.source else f"{self.source}+{other.source}",
        )

    def with_(self, **changes):
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(changes)
        return RegularityCertificate(**kw)

    def to_dict(self):
        return {
            "C": self.C, "C_sigma": self.C_sigma, "C_f": self.C_f,
            "omega": self.omega.to_dict(), "nu": self.nu,
            "gamma": self.gamma, "C_H": self.C_H, "source": self.source,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "omega" in d:
            d["omega"] = Modulus.from_dict(d["omega"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown certificate field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass(frozen=True)
class CoefficientDistance:
    """Sampled sup distances between the coefficients of two operators."""

    d_sigma: float
    d_f: float
    d_ell: float
    sample_spec: str = ""

    def as_tuple(self):
        return (self.d_sigma, self.d_f, self.d_ell)


@dataclass
class CheckItem:
    name: str
    passed: bool
    worst: float
    bound: float
    witness: dict | None = None


@dataclass
class CheckReport:
    """Outcome of a sampled hypothesis check."""

    passed: bool
    items: list
    worst_margin: float = float("nan")
    mode: str = ""

    def item(self, name):
        for it in self.items:
            if it.name == name:
                return it
        raise KeyError(name)

    def failures(self):
        return [it for it in self.items if not it.passed]


def _sample_points(sample_spec, n):
    """Points and a description from a Grid, an array of points, or an int."""
    if hasattr(sample_spec, "points"):
        return sample_spec.points(), f"grid {tuple(sample_spec.sizes)}"
    if isinstance(sample_spec, (int, np.integer)):
        axes = [np.arange(sample_spec) / sample_spec] * n
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
        return pts, f"uniform {sample_spec}^{n}"
    pts = _as_points(sample_spec, n)
    return pts, f"{pts.shape[0]} points"


def coefficient_distance(op1: HJBIOperator, op2: HJBIOperator, sample_spec) -> CoefficientDistance:
    """Max over samples x A x B of |sigma1-sigma2| (Frobenius), |f1-f2|, |l1-l2|."""
    if op1.n != op2.n or op1.p_dim != op2.p_dim:
        raise ConfigurationError("operators have different dimensions")
    if op1.A != op2.A or op1.B != op2.B:
        raise ConfigurationError("operators must share the control sets A and B")
    pts, desc = _sample_points(sample_spec, op1.n)
    s1, f1, l1 = op1.sample(pts)
    s2, f2, l2 = op2.sample(pts)
    d_sigma = float(np.max(np.sqrt(np.sum((s1 - s2) ** 2, axis=(-2, -1)))))
    d_f = float(np.max(np.linalg.norm(f1 - f2, axis=-1)))
    d_ell = float(np.max(np.abs(l1 - l2)))
    return CoefficientDistance(d_sigma, d_f, d_ell, desc)


def sup_bound(op: HJBIOperator, sample_spec):
    """Sampled max of |sigma|, |f|, |l| (the constant C)."""
    pts, _ = _sample_points(sample_spec, op.n)
    s, f, ell = op.sample(pts)
    return float(max(np.max(np.sqrt(np.sum(s**2, axis=(-2, -1)))), np.max(np.linalg.norm(f, axis=-1)),
                     np.max(np.abs(ell))))


def _directions(n, count):
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        th = 2 * np.pi * np.arange(count) / count
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    raise ConfigurationError("structural coercivity check supports n <= 2")


def check_coercivity(
    op: HJBIOperator,
    nu: float,
    sample_spec,
    mode: str = "sampled",
    subset=None,
    C=None,
    radius: float = 10.0,
    n_radii: int = 21,
    n_directions: int = 64,
    hessians=None,
):
    """Check min-max >= nu |p| - C.

    ``sampled`` mode evaluates the Hamiltonian on states x (from
    ``sample_spec``), gradients on ``n_radii`` radii up to ``radius`` along
    ``n_directions`` directions, and the Hessians in ``hessians`` (default:
    the zero matrix). ``C`` defaults to the sampled sup bound of the
    coefficients.

    ``structural`` mode checks the sufficient condition: ``sigma`` vanishes
    on the control indices ``subset`` of A and the ball of radius ``nu`` lies
    in the convex hull of the drifts over ``subset`` for every x and b. The
    hull test compares the support function with ``nu`` along sampled unit
    directions (exact in one dimension).
    """
    if nu <= 0:
        raise ConfigurationError("nu must be positive")
    pts, _ = _sample_points(sample_spec, op.n)
    sig, f, ell = op.sample(pts)
    if mode == "structural":
        if subset is None:
            raise ConfigurationError("structural coercivity check needs the control subset A'")
        idx = np.asarray(list(subset), dtype=int)
        sig_norm = np.sqrt(np.sum(sig[idx] ** 2, axis=(-2, -1)))
        worst_sigma = float(np.max(sig_norm))
        dirs = _directions(op.n, n_directions)
        support = np.einsum("abxn,dn->abxd", f[idx], dirs).max(axis=0)  # (nB, npts, ndir)
        margin = support - nu
        k = np.unravel_index(int(np.argmin(margin)), margin.shape)
        hull_margin = float(margin[k])
        items = [
            CheckItem("sigma_zero_on_subset", worst_sigma <= 1e-12, worst_sigma, 0.0),
            CheckItem(
                "ball_in_hull", hull_margin >= -1e-12, hull_margin, 0.0,
                {"beta": int(k[0]), "x": pts[k[1]].tolist(), "direction": dirs[k[2]].tolist()},
            ),
        ]
        return CheckReport(all(it.passed for it in items), items, hull_margin, "structural")
    if mode != "sampled":
        raise ConfigurationError(f"unknown coercivity mode '{mode}'")
    C = sup_bound(op, pts) if C is None else float(C)
    dirs = _directions(op.n, n_directions) if op.n <= 2 else _random_directions(op.n, n_directions)
    radii = np.linspace(0.0, radius, n_radii)
    grads = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, op.n)
    if hessians is None:
        hessians = [np.zeros((op.n, op.n))]
    a = np.einsum("abxik,abxjk->abxij", sig, sig)
    worst = np.inf
    witness = None
    for X in hessians:
        X = np.asarray(X, dtype=float)
        base = -np.einsum("abxij,ji->abx", a, X) + ell  # (nA, nB, npts)
        vals = base[..., None] + np.einsum("abxn,gn->abxg", f, grads)
        H = vals.max(axis=0).min(axis=0)  # (npts, ngrads)
        margin = H - (nu * np.linalg.norm(grads, axis=1)[None, :] - C)
        k = np.unravel_index(int(np.argmin(margin)), margin.shape)
        if margin[k] < worst:
            worst = float(margin[k])
            witness = {"x": pts[k[0]].tolist(), "p": grads[k[1]].tolist(), "X": X.tolist()}
    items = [CheckItem("coercivity", worst >= -1e-12, worst, 0.0, witness)]
    return CheckReport(worst >= -1e-12, items, worst, "sampled")


def _random_directions(n, count, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(count, n))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


# --------------------------------------------------------------------------
# sampled regularity


def torus_distance(x, y):
    """Euclidean norm of the componentwise periodic distance min(|d|, 1-|d|)."""
    d = np.abs(np.asarray(x, dtype=float) - np.asarray(y, dtype=float)) % 1.0
    d = np.minimum(d, 1.0 - d)
    return np.sqrt(np.sum(d * d, axis=-1))


def sample_pairs(npts, max_pairs=200_000, seed=0):
    """Index pairs i < j: all of them when few enough, else a random subset."""
    total = npts * (npts - 1) // 2
    if total <= max_pairs:
        i, j = np.triu_indices(npts, k=1)
        return i, j
    rng = np.random.default_rng(seed)
    i = rng.integers(0, npts, size=max_pairs)
    j = rng.integers(0, npts, size=max_pairs)
    keep = i != j
    return i[keep], j[keep]


def _pair_quotients(values, pts, i, j, chunk=20_000):
    """max over pairs of |v_i - v_j| / d(i, j), values shaped (..., npts, k)."""
    best, arg = -np.inf, None
    for s in range(0, i.size, chunk):
        ii, jj = i[s:s + chunk], j[s:s + chunk]
        dist = torus_distance(pts[ii], pts[jj])
        diff = np.sqrt(np.sum((values[..., ii, :] - values[..., jj, :]) ** 2, axis=-1))
        q = diff / dist
        k = np.unravel_index(int(np.argmax(q)), q.shape)
        if q[k] > best:
            best, arg = float(q[k]), (k, int(ii[k[-1]]), int(jj[k[-1]]))
    return best, arg


def estimate_lipschitz(op: HJBIOperator, sample_spec, seed=0, max_pairs=200_000):
    """Sampled Lipschitz constants of (sigma, f, l) in x with torus distance."""
    pts, _ = _sample_points(sample_spec, op.n)
    s, f, ell = op.sample(pts)
    i, j = sample_pairs(pts.shape[0], max_pairs, seed)
    ls, _ = _pair_quotients(s.reshape(s.shape[:3] + (-1,)), pts, i, j)
    lf, _ = _pair_quotients(f, pts, i, j)
    ll, _ = _pair_quotients(ell[..., None], pts, i, j)
    return ls, lf, ll


def ellipticity(op: HJBIOperator, sample_spec):
    """Smallest eigenvalue of the diffusion matrix over the samples."""
    pts, _ = _sample_points(sample_spec, op.n)
    s, _, _ = op.sample(pts)
    a = np.einsum("...ik,...jk->...ij", s, s)
    return float(np.min(np.linalg.eigvalsh(a)))


def estimate_certificate(op: HJBIOperator, sample_spec, seed=0) -> RegularityCertificate:
    """Certificate whose constants are sampled from the coefficients."""
    ls, lf, ll = estimate_lipschitz(op, sample_spec, seed)
    return RegularityCertificate(
        C=sup_bound(op, sample_spec),
        C_sigma=ls,
        C_f=lf,
        omega=Modulus.linear(ll),
        nu=max(ellipticity(op, sample_spec), 0.0),
        source="estimated",
    )


def verify_certificate(op: HJBIOperator, cert: RegularityCertificate, sample_spec,
                       slack: float = 1.01, seed: int = 0, max_pairs: int = 200_000) -> CheckReport:
    """Check each declared constant against samples; report the worst violator."""
    pts, _ = _sample_points(sample_spec, op.n)
    s, f, ell = op.sample(pts)
    items = []

    norms = {
        "sup_sigma": np.sqrt(np.sum(s**2, axis=(-2, -1))),
        "sup_f": np.linalg.norm(f, axis=-1),
        "sup_ell": np.abs(ell),
    }
    for name, arr in norms.items():
        k = np.unravel_index(int(np.argmax(arr)), arr.shape)
        worst = float(arr[k])
        items.append(CheckItem(name, worst <= cert.C + 1e-12, worst, cert.C,
                               {"alpha": int(k[0]), "beta": int(k[1]), "x": pts[k[2]].tolist()}))

    i, j = sample_pairs(pts.shape[0], max_pairs, seed)
    for name, vals, bound in (
        ("lipschitz_sigma", s.reshape(s.shape[:3] + (-1,)), cert.C_sigma),
        ("lipschitz_f", f, cert.C_f),
    ):
        q, arg = _pair_quotients(vals, pts, i, j)
        wit = None
        if arg is not None:
            k, a, b = arg
            wit = {"alpha": int(k[0]), "beta": int(k[1]), "x": pts[a].tolist(), "y": pts[b].tolist()}
        items.append(CheckItem(name, q <= bound * slack + 1e-12, q, bound, wit))

    # modulus of l: worst of |l(x)-l(y)| - omega(d)
    worst, wit = -np.inf, None
    for st in range(0, i.size, 20_000):
        ii, jj = i[st:st + 20_000], j[st:st + 20_000]
        d = torus_distance(pts[ii], pts[jj])
        excess = np.abs(ell[..., ii] - ell[..., jj]) - slack * cert.omega(d) - 1e-12
        k = np.unravel_index(int(np.argmax(excess)), excess.shape)
        if excess[k] > worst:
            worst = float(excess[k])
            wit = {"alpha": int(k[0]), "beta": int(k[1]), "x": pts[ii[k[2]]].tolist(),
                   "y": pts[jj[k[2]]].tolist(), "distance": float(d[k[2]])}
    items.append(CheckItem("modulus_ell", worst <= 0.0, worst, 0.0, wit))

    a = np.einsum("...ik,...jk->...ij", s, s)
    eig = np.linalg.eigvalsh(a)[..., 0]
    k = np.unravel_index(int(np.argmin(eig)), eig.shape)
    items.append(CheckItem("ellipticity", float(eig[k]) >= cert.nu - 1e-12, float(eig[k]), cert.nu,
                           {"alpha": int(k[0]), "beta": int(k[1]), "x": pts[k[2]].tolist()}))
    passed = all(it.passed for it in items)
    return CheckReport(passed, items, mode="certificate")
