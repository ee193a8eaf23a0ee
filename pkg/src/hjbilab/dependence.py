"""Continuous dependence bounds and paired numerical experiments.

Parabolic bound, for a shared certificate (C_sigma, C_f, omega, gamma, C_H):

    Cbar   = (2 C_H)^(1/(2-gamma))
    Ctilde = 2 C_sigma^2 Cbar^2 + 2 + C_f Cbar^2 + Cbar
    RHS(t) = t*Ctilde*(d_sigma^gamma + d_f^(gamma/2)) + t*(d_ell + omega(Cbar*(d_sigma + d_f^(1/2))))

Ergodic bound, with K bounding the corrector regularity:

    Mtilde = 2 K (1 + max|l|) (2 C_sigma^2 + 2 + C_f)
    RHS    = Mtilde*(d_sigma + d_f) + omega(d_sigma) + d_ell
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .discretization import DiscreteOperator, Grid, GridFunction, cfl_timestep, seminorm_hoelder
from .ergodic import (DEFAULT_SCHEDULE, DEFAULT_TOL, _plain, corrector_regularity_check,
                      ergodic_long_time, ergodic_vanishing_discount)
from .errors import ConfigurationError, InconclusiveError
from .operator_model import (CoefficientDistance, HJBIOperator, RegularityCertificate, check_coercivity,
                             coefficient_distance, ellipticity, estimate_certificate)
from .parabolic import solve_parabolic

logger = logging.getLogger(__name__)

# err / ((h + dt) * T) is about 0.3 on the heat example; keep a factor ~3 of headroom
C_SLACK = 1.0
K_SAFETY = 2.0


@dataclass(frozen=True)
class BoundConstants:
    C_bar: float | None = None
    C_tilde: float | None = None
    M_tilde: float | None = None
    K: float | None = None
    K_source: str = ""

    @classmethod
    def parabolic(cls, cert: RegularityCertificate):
        if cert.gamma is None or cert.C_H is None:
            raise ConfigurationError("the parabolic bound needs gamma and C_H in the certificate")
        g = cert.gamma
        if not 0.0 < g <= 1.0:
            raise ConfigurationError(f"gamma must lie in (0, 1], got {g}")
        c_bar = (2.0 * cert.C_H) ** (1.0 / (2.0 - g))
        c_tilde = 2 * cert.C_sigma**2 * c_bar**2 + 2 + cert.C_f * c_bar**2 + c_bar
        return cls(C_bar=c_bar, C_tilde=c_tilde)

    @classmethod
    def ergodic(cls, cert: RegularityCertificate, K: float, ell_max: float, K_source="declared"):
        if K < 0:
            raise ConfigurationError(f"K must be nonnegative, got {K}")
        m = 2 * K * (1 + ell_max) * (2 * cert.C_sigma**2 + 2 + cert.C_f)
        return cls(M_tilde=m, K=K, K_source=K_source)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def parabolic_bound_rhs(dist: CoefficientDistance, cert: RegularityCertificate, t):
    """Right-hand side of the parabolic dependence estimate at time(s) t."""
    bc = BoundConstants.parabolic(cert)
    g = cert.gamma
    ds, df, dl = dist.d_sigma, dist.d_f, dist.d_ell
    rate = bc.C_tilde * (ds**g + df ** (g / 2)) + dl + cert.omega(bc.C_bar * (ds + np.sqrt(df)))
    return np.asarray(t, dtype=float) * rate if np.ndim(t) else float(t) * float(rate)


def ergodic_bound_rhs(dist: CoefficientDistance, cert: RegularityCertificate, K: float, ell_max: float = 0.0):
    """Right-hand side of the ergodic dependence estimate."""
    bc = BoundConstants.ergodic(cert, K, ell_max)
    return float(bc.M_tilde * (dist.d_sigma + dist.d_f) + cert.omega(dist.d_sigma) + dist.d_ell)


@dataclass(eq=False)
class DependenceReport:
    kind: str
    distances: CoefficientDistance
    times: np.ndarray
    bound_curve: np.ndarray
    empirical_curve: np.ndarray
    verdict: str
    slack: float
    constants: BoundConstants
    certificate: RegularityCertificate
    witness_t: float | None = None
    details: dict = field(default_factory=dict)

    @property
    def margin_curve(self):
        return self.bound_curve - self.empirical_curve

    @property
    def holds(self):
        return self.verdict == "holds"

    def to_dict(self):
        return {
            "kind": self.kind,
            "verdict": self.verdict,
            "witness_t": self.witness_t,
            "slack": self.slack,
            "distances": {"d_sigma": self.distances.d_sigma, "d_f": self.distances.d_f,
                          "d_ell": self.distances.d_ell, "samples": self.distances.sample_spec},
            "times": self.times,
            "bound": self.bound_curve,
            "empirical": self.empirical_curve,
            "margin": self.margin_curve,
            "constants": self.constants.to_dict(),
            "certificate": self.certificate.to_dict(),
            "details": self.details,
        }

    def to_json(self, path):
        Path(path).write_text(json.dumps(_plain(self.to_dict()), indent=2))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "empirical", "bound", "margin"])
            for row in zip(self.times, self.empirical_curve, self.bound_curve, self.margin_curve):
                w.writerow([repr(float(v)) for v in row])


def _verdict(times, empirical, bound, slack):
    bad = empirical > bound + slack
    if np.any(bad):
        return "violated", float(times[int(np.argmax(bad))])
    return "holds", None


def _shared_certificate(op1, op2, grid, cert, seed):
    if cert is not None:
        return cert, cert.source
    c = estimate_certificate(op1, grid, seed).combine(estimate_certificate(op2, grid, seed))
    return c, "estimated"


def _lipschitz_regime(op1, op2, grid, coercivity):
    """Return a label when the solutions are known to be Lipschitz in x, else None."""
    if min(ellipticity(op1, grid), ellipticity(op2, grid)) > 0.0:
        return "uniformly elliptic"
    if coercivity is not None:
        nu, subset = coercivity
        reports = [check_coercivity(op, nu, grid, mode="structural", subset=subset) for op in (op1, op2)]
        if all(r.passed for r in reports):
            return f"coercive (structural, nu = {nu:g})"
        fails = [it.name for r in reports for it in r.failures()]
        raise ConfigurationError(f"structural coercivity check failed: {', '.join(fails)}")
    return None


def parabolic_dependence_experiment(op1: HJBIOperator, op2: HJBIOperator, grid: Grid, T: float = 1.0,
                                    cert: RegularityCertificate | None = None, *, initial=None,
                                    c_slack: float = C_SLACK, coercivity=None, n_layers: int = 50,
                                    seed: int = 0) -> DependenceReport:
    """Solve both Cauchy problems with one time step and compare against the bound.

    ``coercivity`` is an optional (nu, control index subset) pair used to
    certify gamma = 1 for degenerate operators. When ``cert`` lacks gamma
    it is set to 1 if either ellipticity or coercivity certifies it; when it
    lacks C_H that is estimated as the largest Hoelder seminorm over all
    stored layers of both solutions.
    """
    dist = coefficient_distance(op1, op2, grid)
    cert, cert_source = _shared_certificate(op1, op2, grid, cert, seed)
    details = {"certificate_source": cert_source}
    if cert.gamma is None:
        regime = _lipschitz_regime(op1, op2, grid, coercivity)
        if regime is None:
            raise ConfigurationError(
                "cannot certify Lipschitz solutions (operators are degenerate and no coercivity "
                "data was given); declare gamma in the certificate"
            )
        cert = cert.with_(gamma=1.0)
        details["gamma_source"] = regime
    else:
        details["gamma_source"] = "declared"

    d1 = DiscreteOperator.from_operator(op1, grid)
    d2 = DiscreteOperator.from_operator(op2, grid)
    dt = min(cfl_timestep(d1), cfl_timestep(d2))
    store_every = max(1, int(T / dt) // n_layers)
    tr1 = solve_parabolic(d1, T=T, initial=initial, store_every=store_every, dt=dt)
    tr2 = solve_parabolic(d2, T=T, initial=initial, store_every=store_every, dt=dt)
    times = tr1.times
    if cert.C_H is None:
        c_h = max(seminorm_hoelder(GridFunction(grid, v), cert.gamma, seed=seed)
                  for tr in (tr1, tr2) for v in tr.values)
        cert = cert.with_(C_H=c_h)
        details["C_H_source"] = "estimated from stored layers"
    else:
        details["C_H_source"] = "declared"

    constants = BoundConstants.parabolic(cert)
    bound = parabolic_bound_rhs(dist, cert, times)
    empirical = np.max(np.abs(tr1.values - tr2.values).reshape(len(times), -1), axis=1)
    slack = c_slack * (max(grid.h) + dt) * T
    verdict, witness = _verdict(times, empirical, bound, slack)
    details.update({"dt": dt, "grid": list(grid.sizes), "T": T, "c_slack": c_slack,
                    "slack_needed": bool(np.any(empirical > bound))})
    return DependenceReport("parabolic", dist, times, bound, empirical, verdict, slack, constants, cert,
                            witness, details)


def ergodic_dependence_experiment(op1: HJBIOperator, op2: HJBIOperator, grid: Grid,
                                  cert: RegularityCertificate | None = None, *, K: float | None = None,
                                  schedule=DEFAULT_SCHEDULE, tol: float = DEFAULT_TOL, T_long: float = 2.0,
                                  window: float = 0.5, seed: int = 0) -> DependenceReport:
    """Compare |U1 - U2| with the ergodic bound.

    U is taken from the vanishing-discount estimator; the slack is the sum
    of the two gaps between the vanishing-discount and long-time estimates.
    K defaults to twice the empirical corrector constant of the two runs.
    """
    dist = coefficient_distance(op1, op2, grid)
    cert, cert_source = _shared_certificate(op1, op2, grid, cert, seed)
    details = {"certificate_source": cert_source}
    d1 = DiscreteOperator.from_operator(op1, grid)
    d2 = DiscreteOperator.from_operator(op2, grid)
    r1 = ergodic_vanishing_discount(d1, schedule=schedule, tol=tol)
    r2 = ergodic_vanishing_discount(d2, schedule=schedule, tol=tol)
    if K is None:
        k_emp = max(corrector_regularity_check(r.solves).K_emp for r in (r1, r2))
        K, K_source = K_SAFETY * k_emp, f"empirical (K_emp = {k_emp:.6g} x {K_SAFETY:g})"
    else:
        K_source = "declared"
    ell_max = float(max(np.max(np.abs(d1.ell)), np.max(np.abs(d2.ell))))
    constants = BoundConstants.ergodic(cert, K, ell_max, K_source)
    bound = ergodic_bound_rhs(dist, cert, K, ell_max)
    empirical = abs(r1.U - r2.U)
    details.update({"U1": r1.U, "U2": r2.U, "K_source": K_source, "ell_max": ell_max,
                    "grid": list(grid.sizes), "schedule": list(schedule)})
    try:
        gaps = [abs(r.U - ergodic_long_time(d, T=T_long, window=window).U) for r, d in ((r1, d1), (r2, d2))]
    except InconclusiveError as exc:
        details["inconclusive_reason"] = str(exc)
        return DependenceReport("ergodic", dist, np.array([0.0]), np.array([bound]), np.array([empirical]),
                                "inconclusive", float("nan"), constants, cert, None, details)
    slack = float(sum(gaps))
    details["estimator_gaps"] = gaps
    verdict = "holds" if empirical <= bound + slack else "violated"
    return DependenceReport("ergodic", dist, np.array([0.0]), np.array([bound]), np.array([empirical]),
                            verdict, slack, constants, cert, None, details)
