"""Explicit monotone time stepping for  u_t + H(x, Du, D^2u) = 0  on the torus."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .discretization import DiscreteOperator, Grid, GridFunction, cfl_timestep
from .errors import ConfigurationError, DivergenceError
from .operator_model import HJBIOperator

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class ParabolicTrajectory:
    """Stored layers of an explicit solve; ``values[k]`` is the layer at ``times[k]``."""

    grid: Grid
    times: np.ndarray
    values: np.ndarray
    dt: float
    steps: int
    operator: object = None
    meta: dict = field(default_factory=dict)

    @property
    def initial(self):
        return GridFunction(self.grid, self.values[0])

    @property
    def layers(self):
        return [GridFunction(self.grid, v) for v in self.values]

    def layer(self, k):
        return GridFunction(self.grid, self.values[k])

    def final(self):
        return GridFunction(self.grid, self.values[-1])

    def at(self, t, atol=1e-12):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > atol * max(1.0, abs(t)):
            raise KeyError(f"time {t} is not a stored layer")
        return self.layer(k)

    def export(self, directory, fmt="binary"):
        """Write one file per layer plus ``manifest.json``; returns written paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for k, v in enumerate(self.values):
            gf = GridFunction(self.grid, v)
            if fmt == "csv":
                p = directory / f"layer_{k:05d}.csv"
                gf.to_csv(p)
            else:
                p = directory / f"layer_{k:05d}.bin"
                gf.to_binary(p)
            paths.append(p)
        manifest = {
            "operator_hash": getattr(self.operator, "fingerprint", lambda: None)(),
            "grid": list(self.grid.sizes),
            "dt": self.dt,
            "steps": self.steps,
            "times": [float(t) for t in self.times],
            "format": fmt,
            "layers": [p.name for p in paths],
            **{k: v for k, v in self.meta.items() if _jsonable(v)},
        }
        mp = directory / "manifest.json"
        mp.write_text(json.dumps(manifest, indent=2))
        return paths + [mp]


def _jsonable(v):
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


def _discrete(op, grid):
    if isinstance(op, DiscreteOperator):
        if grid is not None and op.grid != grid:
            raise ConfigurationError("discrete operator lives on a different grid")
        return op
    if grid is None:
        raise ConfigurationError("a grid is required to discretize the operator")
    return DiscreteOperator.from_operator(op, grid)


def explicit_march(step_fn, u0, T, dt, store_every=1, save_times=()):
    """March u <- step_fn(u, dt) up to T, landing exactly on T and on ``save_times``.

    Layers are stored at t=0, every ``store_every`` steps, at each save time
    and at T. Returns (times, layers, steps).
    """
    if T <= 0:
        raise ConfigurationError(f"final time must be positive, got {T}")
    if dt <= 0:
        raise ConfigurationError(f"time step must be positive, got {dt}")
    targets = sorted({float(s) for s in save_times if 0.0 < s < T} | {float(T)})
    u = np.array(u0, dtype=float)
    times, layers = [0.0], [u.copy()]
    t, k, ti = 0.0, 0, 0
    tiny = 1e-12 * T
    while ti < len(targets):
        target = targets[ti]
        step = dt
        hit = False
        if t + step >= target - tiny:
            step = target - t
            hit = True
        u = step_fn(u, step)
        k += 1
        if not np.all(np.isfinite(u)):
            raise DivergenceError(f"non-finite values at step {k} (t = {t + step:.6g})")
        if hit:
            t = target
            ti += 1
        else:
            t = t + step
        if hit or k % store_every == 0:
            if times[-1] != t:
                times.append(t)
                layers.append(u.copy())
    return np.array(times), np.array(layers), k


def solve_parabolic(op, grid: Grid = None, T: float = 1.0, initial=None, store_every: int = 1,
                    dt: float | None = None, save_times=()) -> ParabolicTrajectory:
    """Solve the Cauchy problem by u^{k+1} = u^k - dt * H_h(u^k).

    ``op`` is an HJBIOperator (discretized on ``grid``) or a
    DiscreteOperator. ``initial`` is a GridFunction, an array, an expression
    in x1..xn, or None for the zero datum. The step defaults to
    ``cfl_timestep``; an explicit ``dt`` larger than that is rejected.
    """
    dop = _discrete(op, grid)
    grid = dop.grid
    dt_cfl = cfl_timestep(dop)
    if dt is None:
        dt = dt_cfl
    elif dt > dt_cfl * (1 + 1e-12):
        raise ConfigurationError(f"dt = {dt:.3g} exceeds the monotonicity limit {dt_cfl:.3g}")
    u0 = _initial_values(initial, grid)

    def step(u, s):
        return u - s * dop.hamiltonian(u)

    times, layers, k = explicit_march(step, u0, T, dt, store_every, save_times)
    logger.debug("parabolic solve: %d steps of dt=%.3g on grid %s", k, dt, grid.sizes)
    return ParabolicTrajectory(grid, times, layers, dt, k, op if isinstance(op, HJBIOperator) else None)


def _initial_values(initial, grid):
    if initial is None:
        return np.zeros(grid.shape)
    if isinstance(initial, GridFunction):
        if initial.grid != grid:
            raise ConfigurationError("initial datum lives on a different grid")
        return np.array(initial.values)
    if isinstance(initial, str):
        return np.array(GridFunction.from_expression(grid, initial).values)
    return np.array(GridFunction(grid, initial).values)


@dataclass
class TimeLipschitzReport:
    passed: bool
    worst_ratio: float
    witness_times: tuple | None
    C: float


def time_lipschitz_check(traj: ParabolicTrajectory, C: float, slack: float = 1e-9) -> TimeLipschitzReport:
    """Check sup_x |u(t+h,x) - u(t,x)| <= C h over consecutive stored layers."""
    if len(traj.times) < 2:
        raise ConfigurationError("need at least two stored layers")
    dts = np.diff(traj.times)
    jumps = np.max(np.abs(np.diff(traj.values, axis=0)).reshape(len(dts), -1), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(jumps == 0.0, 0.0, jumps / (C * dts))
    k = int(np.argmax(ratios))
    worst = float(ratios[k])
    passed = worst <= 1.0 + slack
    witness = None if passed else (float(traj.times[k]), float(traj.times[k + 1]))
    return TimeLipschitzReport(passed, worst, witness, C)


@dataclass
class SlopeEstimate:
    slope: np.ndarray
    spread: float
    flagged: bool
    window: tuple
    n_layers: int

    def __iter__(self):
        yield self.slope
        yield self.spread


def long_time_slope(traj: ParabolicTrajectory, window: float = 0.5, threshold: float = 1e-3) -> SlopeEstimate:
    """Least-squares slope of t -> u(t, x) over the trailing ``window`` fraction of the horizon.

    ``spread`` is max - min of the nodal slopes; it is flagged when above
    ``threshold`` (the solution has not reached its linear regime).
    """
    if not 0 < window <= 1:
        raise ConfigurationError("window must be a fraction in (0, 1]")
    t_end = traj.times[-1]
    sel = traj.times >= (1.0 - window) * t_end - 1e-14
    if sel.sum() < 3:
        raise ConfigurationError(f"window holds {int(sel.sum())} layers, need at least 3")
    t = traj.times[sel]
    V = traj.values[sel].reshape(sel.sum(), -1)
    tc = t - t.mean()
    slope = (tc @ (V - V.mean(axis=0))) / (tc @ tc)
    spread = float(slope.max() - slope.min())
    return SlopeEstimate(slope.reshape(traj.grid.shape), spread, spread > threshold,
                         (float(t[0]), float(t[-1])), int(sel.sum()))
