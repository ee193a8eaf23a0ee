"""Periodic grids on the unit torus and the monotone stencil of the min-max operator.

Every linear operator in the min-max is written in "difference form"

    L_ab u(x) = sum_k w_k(x, a, b) * (u(x) - u(x + s_k h)) + l(x, a, b)

over a fixed list of offsets ``s_k``: the axis neighbours +-e_i, and for
each pair i < j the diagonals +-(e_i + e_j) (used where a_ij > 0) and
+-(e_i - e_j) (used where a_ij < 0). The scheme is monotone exactly when
all weights are nonnegative; for the diffusion part this is the weighted
diagonal dominance a_ii / h_i >= sum_{j != i} |a_ij| / h_j.
"""

from __future__ import annotations

import csv
import itertools
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import expressions as ex
from .errors import AdmissibilityError, ConfigurationError
from .operator_model import HJBIOperator, torus_distance

SAFETY = 0.9
DT_MAX = 1e-2


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid with ``sizes[i]`` nodes on axis i, spacing 1/size."""

    sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in np.atleast_1d(self.sizes))
        if not sizes or any(s < 4 for s in sizes):
            raise ConfigurationError(f"grid needs at least 4 nodes per axis, got {sizes}")
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def uniform(cls, size, n=1):
        return cls((size,) * n)

    @property
    def n(self):
        return len(self.sizes)

    @property
    def shape(self):
        return self.sizes

    @property
    def h(self):
        return tuple(1.0 / s for s in self.sizes)

    @property
    def node_count(self):
        return int(np.prod(self.sizes))

    def axes(self):
        return [np.arange(s) / s for s in self.sizes]

    def points(self):
        """Node coordinates, shape (node_count, n), row-major node order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def coordinates(self, node):
        node = self.multi_index(node)
        return np.array([i / s for i, s in zip(node, self.sizes)])

    def multi_index(self, node):
        if isinstance(node, (int, np.integer)):
            return tuple(int(v) for v in np.unravel_index(int(node), self.sizes))
        node = tuple(int(v) for v in node)
        if len(node) != self.n:
            raise ConfigurationError(f"node index {node} does not match grid dimension {self.n}")
        return tuple(v % s for v, s in zip(node, self.sizes))

    def refine(self, factor=2):
        return Grid(tuple(s * factor for s in self.sizes))


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Nodal values on a periodic grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.size != self.grid.node_count:
            raise ConfigurationError(f"{vals.size} values for a grid of {self.grid.node_count} nodes")
        vals = vals.reshape(self.grid.shape)
        if not np.all(np.isfinite(vals)):
            raise ConfigurationError("grid function has non-finite values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_callable(cls, grid, fn):
        """Values fn(x1, ..., xn) evaluated on the node mesh."""
        mesh = np.meshgrid(*grid.axes(), indexing="ij")
        return cls(grid, np.broadcast_to(np.asarray(fn(*mesh), dtype=float), grid.shape))

    @classmethod
    def from_expression(cls, grid, text, prefix="x"):
        expr = ex.parse(text)
        mesh = np.meshgrid(*grid.axes(), indexing="ij")
        env = {f"{prefix}{i + 1}": m for i, m in enumerate(mesh)}
        return cls(grid, ex.evaluate(expr, env, grid.shape))

    def __getitem__(self, node):
        return float(self.values[self.grid.multi_index(node)])

    def sup_norm(self):
        return float(np.max(np.abs(self.values)))

    def normalized(self, node=0):
        """Copy shifted so that the value at ``node`` is zero."""
        return GridFunction(self.grid, self.values - self[node])

    # -- serialization -----------------------------------------------------

    def to_csv(self, path):
        pts = self.grid.points()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(self.grid.n)] + ["value"])
            for p, v in zip(pts, self.values.ravel()):
                w.writerow([repr(float(c)) for c in p] + [repr(float(v))])

    @classmethod
    def from_csv(cls, path, grid=None):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        n = len(header) - 1
        data = np.array([[float(c) for c in r] for r in body])
        if grid is None:
            sizes = tuple(len(np.unique(np.round(data[:, i], 12))) for i in range(n))
            grid = Grid(sizes)
        idx = np.rint(data[:, :n] * np.array(grid.sizes)).astype(int) % np.array(grid.sizes)
        vals = np.empty(grid.shape)
        vals[tuple(idx.T)] = data[:, n]
        return cls(grid, vals)

    def to_binary(self, path):
        """Header ``b'HJGF'``, uint32 version (1), uint32 ndim, uint32 sizes,
        then float64 values in row-major order; all little-endian."""
        with open(path, "wb") as fh:
            fh.write(_BIN_MAGIC)
            fh.write(struct.pack("<II", 1, self.grid.n))
            fh.write(struct.pack(f"<{self.grid.n}I", *self.grid.sizes))
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def from_binary(cls, path):
        raw = Path(path).read_bytes()
        if raw[:4] != _BIN_MAGIC:
            raise ConfigurationError(f"{path}: not a grid function file")
        version, ndim = struct.unpack_from("<II", raw, 4)
        if version != 1:
            raise ConfigurationError(f"{path}: unsupported version {version}")
        sizes = struct.unpack_from(f"<{ndim}I", raw, 12)
        offset = 12 + 4 * ndim
        vals = np.frombuffer(raw, dtype="<f8", offset=offset)
        grid = Grid(sizes)
        return cls(grid, vals.reshape(grid.shape))


_BIN_MAGIC = b"HJGF"


def stencil_offsets(n):
    """Axis offsets +-e_i then diagonal offsets +-(e_i+e_j), +-(e_i-e_j), i<j."""
    offs = []
    for i in range(n):
        for sgn in (1, -1):
            e = [0] * n
            e[i] = sgn
            offs.append(tuple(e))
    for i, j in itertools.combinations(range(n), 2):
        for si, sj in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
            e = [0] * n
            e[i], e[j] = si, sj
            offs.append(tuple(e))
    return offs


@dataclass(frozen=True)
class StencilBudget:
    """Worst-case coefficient sums used for the explicit time-step restriction."""

    diffusion_sum: np.ndarray
    drift_sum: np.ndarray

    def total(self):
        return self.diffusion_sum + self.drift_sum

    def max(self):
        return float(np.max(self.total())) if self.total().size else 0.0


def _diffusion_matrix(sigma):
    return np.einsum("...ik,...jk->...ij", sigma, sigma)


def _weights(grid, a, f, check=True, labels=None):
    """Stencil weights (K, nA, nB, *shape) from a (.., n, n) and f (.., n)."""
    n = grid.n
    h = grid.h
    offs = stencil_offsets(n)
    lead = a.shape[:-2]
    W = np.zeros((len(offs),) + lead)
    pos = {o: k for k, o in enumerate(offs)}
    for i in range(n):
        axis_w = a[..., i, i] / h[i] ** 2
        for j in range(n):
            if j != i:
                axis_w = axis_w - np.abs(a[..., i, j]) / (h[i] * h[j])
        fp = np.maximum(f[..., i], 0.0) / h[i]
        fm = np.maximum(-f[..., i], 0.0) / h[i]
        e_plus = tuple(1 if k == i else 0 for k in range(n))
        e_minus = tuple(-1 if k == i else 0 for k in range(n))
        W[pos[e_plus]] = axis_w + fm
        W[pos[e_minus]] = axis_w + fp
    for i, j in itertools.combinations(range(n), 2):
        hij = h[i] * h[j]
        ap = np.maximum(a[..., i, j], 0.0) / hij
        am = np.maximum(-a[..., i, j], 0.0) / hij
        for si, sj in ((1, 1), (-1, -1)):
            W[pos[_off(n, i, j, si, sj)]] = ap
        for si, sj in ((1, -1), (-1, 1)):
            W[pos[_off(n, i, j, si, sj)]] = am
    # round-off at exact dominance
    scale = np.max(np.abs(W)) if W.size else 0.0
    tiny = 1e-12 * max(scale, 1.0)
    neg = W < -tiny
    if check and np.any(neg):
        k = tuple(int(v) for v in np.argwhere(neg)[0])
        off = offs[k[0]]
        where = labels(k[1:]) if labels else f"index {k[1:]}"
        raise AdmissibilityError(
            f"stencil not monotone: weight {W[k]:.6g} < 0 for offset {off} at {where}; "
            "the diffusion matrix violates weighted diagonal dominance a_ii/h_i >= sum |a_ij|/h_j"
        )
    W = np.where(np.abs(W) <= tiny, np.maximum(W, 0.0), W)
    return offs, W


def _off(n, i, j, si, sj):
    e = [0] * n
    e[i], e[j] = si, sj
    return tuple(e)


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    """Monotone difference form of a min-max operator on a periodic grid.

    ``weights`` has shape (K, nA, nB, *grid.shape) and ``ell`` has shape
    (nA, nB, *grid.shape).
    """

    grid: Grid
    offsets: tuple
    weights: np.ndarray
    ell: np.ndarray
    budget: StencilBudget = field(repr=False, default=None)

    @classmethod
    def from_coefficients(cls, grid, sigma, f, ell, check=True):
        """Build from sampled coefficients with a flat node axis.

        sigma: (nA, nB, N, n, p); f: (nA, nB, N, n); ell: (nA, nB, N).
        """
        nA, nB = ell.shape[:2]
        shape = (nA, nB) + grid.shape
        n = grid.n
        a = _diffusion_matrix(sigma).reshape(shape + (n, n))
        fv = f.reshape(shape + (n,))
        pts = grid.points()

        def labels(k):
            ia, ib = k[0], k[1]
            node = k[2:]
            return f"alpha #{ia}, beta #{ib}, node {node} (x = {pts[np.ravel_multi_index(node, grid.shape)].tolist()})"

        offs, W = _weights(grid, a, fv, check=check, labels=labels)
        h = grid.h
        diff = np.zeros(shape)
        drift = np.zeros(shape)
        for i in range(n):
            diff = diff + 2.0 * a[..., i, i] / h[i] ** 2
            drift = drift + np.abs(fv[..., i]) / h[i]
            for j in range(n):
                if j != i:
                    diff = diff + np.abs(a[..., i, j]) / (h[i] * h[j])
        budget = StencilBudget(diff, drift)
        # drop offsets that are never used
        used = [k for k in range(len(offs)) if np.any(W[k] != 0.0)]
        return cls(grid, tuple(offs[k] for k in used), W[used], ell.reshape(shape).copy(), budget)

    @classmethod
    def from_operator(cls, op: HJBIOperator, grid: Grid, check=True):
        if op.n != grid.n:
            raise ConfigurationError(f"operator dimension {op.n} does not match grid dimension {grid.n}")
        sigma, f, ell = op.sample(grid.points())
        return cls.from_coefficients(grid, sigma, f, ell, check=check)

    @property
    def n_controls(self):
        return self.ell.shape[:2]

    def with_ell(self, ell):
        return replace(self, ell=np.broadcast_to(ell, self.ell.shape).copy())

    @cached_property
    def _difference_matrix(self):
        """Sparse (K*N, N) matrix mapping u to the stacked differences."""
        N = self.grid.node_count
        shape = self.grid.shape
        idx = np.indices(shape).reshape(self.grid.n, N)
        rows, cols, data = [], [], []
        for k, off in enumerate(self.offsets):
            nb = np.ravel_multi_index(tuple((idx[i] + off[i]) % shape[i] for i in range(self.grid.n)), shape)
            r = k * N + np.arange(N)
            rows += [r, r]
            cols += [np.arange(N), nb]
            data += [np.ones(N), -np.ones(N)]
        if not rows:
            return sp.csr_matrix((0, N))
        return sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(len(self.offsets) * N, N))

    @cached_property
    def _linear_matrix(self):
        zero = np.zeros(self.grid.shape, dtype=int)
        return self.matrix(zero, zero).tocsr()

    def differences(self, u):
        """u(x) - u(x + s_k h) for every offset, shape (K, *grid.shape)."""
        u = np.asarray(u, dtype=float).reshape(-1)
        return (self._difference_matrix @ u).reshape((len(self.offsets),) + self.grid.shape)

    def payoffs(self, u, ell=None):
        """L_ab u for every control pair, shape (nA, nB, *grid.shape).

        ``ell`` overrides the stored running cost.
        """
        ell = self.ell if ell is None else ell
        if not self.offsets:
            return np.broadcast_to(ell, self.ell.shape).copy()
        d = self.differences(u)
        nA, nB = self.n_controls
        out = np.empty(self.ell.shape)
        for a in range(nA):
            for b in range(nB):
                out[a, b] = np.einsum("k...,k...->...", self.weights[:, a, b], d)
        return out + ell

    def hamiltonian(self, u, ell=None):
        """Discrete H_h(u) at every node."""
        ell = self.ell if ell is None else ell
        if self.n_controls == (1, 1):
            u = np.asarray(u, dtype=float)
            Lu = (self._linear_matrix @ u.reshape(-1)).reshape(self.grid.shape)
            return Lu + np.broadcast_to(ell, self.ell.shape)[0, 0]
        return self.payoffs(u, ell).max(axis=0).min(axis=0)

    def policy(self, u, ell=None):
        """Active (alpha, beta) index arrays: first argmin over b of max over a."""
        L = self.payoffs(u, ell)
        upper = L.max(axis=0)
        ib = np.argmin(upper, axis=0)
        ia = np.argmax(np.take_along_axis(L, ib[None, None], axis=1)[:, 0], axis=0)
        return ia, ib

    def select(self, arr, ia, ib):
        """arr[..., ia(x), ib(x), x] for an array with leading (nA, nB) axes after ``lead``."""
        lead = arr.ndim - 2 - self.grid.n
        idx = np.indices(self.grid.shape)
        sl = (slice(None),) * lead + (ia, ib) + tuple(idx)
        return arr[sl]

    def matrix(self, ia, ib, delta=0.0):
        """Sparse matrix of delta*I + L_pi for the policy (ia, ib) (without the cost)."""
        N = self.grid.node_count
        shape = self.grid.shape
        w = self.select(self.weights, ia, ib).reshape(len(self.offsets), N)
        rows = np.arange(N)
        idx = np.indices(shape).reshape(self.grid.n, N)
        data = [delta + w.sum(axis=0)]
        ri = [rows]
        ci = [rows]
        for k, off in enumerate(self.offsets):
            nb = np.ravel_multi_index(tuple((idx[i] + off[i]) % shape[i] for i in range(self.grid.n)), shape)
            data.append(-w[k])
            ri.append(rows)
            ci.append(nb)
        return sp.csc_matrix(
            (np.concatenate(data), (np.concatenate(ri), np.concatenate(ci))), shape=(N, N)
        )

    def node_value(self, u, node):
        """H_h(u) at a single node."""
        node = self.grid.multi_index(node)
        u = np.asarray(u, dtype=float).reshape(self.grid.shape)
        axes_shape = self.grid.shape
        diffs = np.array(
            [u[node] - u[tuple((node[i] + off[i]) % axes_shape[i] for i in range(self.grid.n))] for off in self.offsets]
        )
        sl = (slice(None),) * 3 + node if self.offsets else None
        table = self.ell[(slice(None), slice(None)) + node].copy()
        if self.offsets:
            table = table + np.einsum("kab,k->ab", self.weights[sl], diffs)
        return float(table.max(axis=0).min())


def discrete_hamiltonian(op, u: GridFunction, node=None):
    """H_h(u) at ``node`` (or the whole field when ``node`` is None).

    ``op`` may be an HJBIOperator (discretized on ``u.grid``) or a
    DiscreteOperator.
    """
    dop = op if isinstance(op, DiscreteOperator) else DiscreteOperator.from_operator(op, u.grid)
    if node is None:
        return GridFunction(u.grid, dop.hamiltonian(u.values))
    return dop.node_value(u.values, node)


def cfl_timestep(op, grid: Grid = None, discount: float = 0.0, safety: float = SAFETY, dt_max: float = DT_MAX):
    """Largest explicit step keeping u - dt * H_h(u) monotone (times ``safety``).

    dt = safety / (max over nodes and controls of the stencil budget + discount);
    falls back to ``dt_max`` when the denominator vanishes.
    """
    dop = op if isinstance(op, DiscreteOperator) else DiscreteOperator.from_operator(op, grid)
    denom = dop.budget.max() + discount
    if denom <= 0.0:
        return dt_max
    return safety / denom


# --------------------------------------------------------------------------
# seminorms


def _local_offsets(n, radius):
    rng = range(-radius, radius + 1)
    offs = [o for o in itertools.product(rng, repeat=n) if any(o)]
    # keep one representative of each +-pair
    return [o for o in offs if tuple(-v for v in o) > o]


def seminorm_hoelder(u: GridFunction, gamma: float, exhaustive_limit: int = 2048, radius: int = 4,
                     n_random: int = 200_000, seed: int = 0) -> float:
    """max |u(x) - u(y)| / d(x, y)^gamma with the torus distance.

    Exact over all node pairs when the grid has at most ``exhaustive_limit``
    nodes. Larger grids use every pair within ``radius`` index steps plus
    ``n_random`` random pairs, which gives a lower bound of the exact value.
    """
    if not 0.0 < gamma <= 1.0:
        raise ConfigurationError(f"gamma must lie in (0, 1], got {gamma}")
    grid = u.grid
    vals = u.values
    N = grid.node_count
    if N <= exhaustive_limit:
        pts = grid.points()
        flat = vals.ravel()
        best = 0.0
        for s in range(0, N, 256):
            d = torus_distance(pts[s:s + 256, None, :], pts[None, :, :])
            diff = np.abs(flat[s:s + 256, None] - flat[None, :])
            with np.errstate(divide="ignore", invalid="ignore"):
                q = np.where(d > 0, diff / np.power(np.where(d > 0, d, 1.0), gamma), 0.0)
            best = max(best, float(q.max()))
        return best
    best = 0.0
    h = np.array(grid.h)
    axes = tuple(range(grid.n))
    for off in _local_offsets(grid.n, radius):
        dist = np.minimum(np.abs(off) * h, 1 - np.abs(off) * h)
        d = float(np.sqrt(np.sum(dist**2)))
        if d == 0.0:
            continue
        shifted = np.roll(vals, tuple(-o for o in off), axis=axes)
        best = max(best, float(np.max(np.abs(vals - shifted))) / d**gamma)
    rng = np.random.default_rng(seed)
    pts = grid.points()
    flat = vals.ravel()
    i = rng.integers(0, N, n_random)
    j = rng.integers(0, N, n_random)
    d = torus_distance(pts[i], pts[j])
    ok = d > 0
    if np.any(ok):
        best = max(best, float(np.max(np.abs(flat[i[ok]] - flat[j[ok]]) / d[ok] ** gamma)))
    return best
