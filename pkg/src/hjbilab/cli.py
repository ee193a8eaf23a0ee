"""Command-line entry point: ``hjbilab <workflow> --config FILE --out DIR``.

Exit status is 0 when the run succeeds and every verdict it produces is
non-failing, 1 when a verdict fails, and 2 on configuration or solver
errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import WORKFLOWS, ExperimentConfig, load_config, validate
from .dependence import C_SLACK, ergodic_dependence_experiment, parabolic_dependence_experiment
from .discretization import DiscreteOperator, GridFunction
from .ergodic import DEFAULT_SCHEDULE, DEFAULT_TOL, _plain, ergodic_long_time, ergodic_vanishing_discount
from .errors import ConfigurationError, HJBILabError, InconclusiveError
from .homogenization import (DT_FLOOR, EffectiveHamiltonianCache, convergence_study, effective_structure_check,
                             solve_effective, solve_two_scale)
from .parabolic import solve_parabolic

logger = logging.getLogger("hjbilab")

AGREEMENT_GAP = 2e-3


@dataclass
class RunManifest:
    workflow: str
    config_hash: str
    version: str
    ok: bool
    wall_clock: float
    timings: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "workflow": self.workflow,
            "config_hash": self.config_hash,
            "version": self.version,
            "ok": self.ok,
            "wall_clock_seconds": self.wall_clock,
            "timings": self.timings,
            "settings": self.settings,
            "summary": _plain(self.summary),
            "files": self.files,
        }


class _Stages:
    def __init__(self):
        self.timings = {}

    def run(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except HJBILabError as err:
            raise type(err)(f"[{name}] {err}") from err
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0


def _write_json(path, data):
    Path(path).write_text(json.dumps(_plain(data), indent=2, sort_keys=True))
    return Path(path)


def _initial(cfg, grid):
    init = cfg.params.get("initial")
    if init is None:
        return None
    return GridFunction.from_expression(grid, init)


def _fmt(cfg):
    return cfg.params.get("format", "binary")


# -- workflows --------------------------------------------------------------


def _solve_parabolic(cfg, out, st, seed):
    (op,) = cfg.operator_list()
    grid = cfg.grid()
    T = float(cfg.params["T"])
    init = _initial(cfg, grid)
    traj = st.run("solve", solve_parabolic, op, grid, T, init, int(cfg.params.get("store_every", 1)),
                  save_times=cfg.params.get("save_times", ()))
    files = st.run("export", traj.export, out / "trajectory", _fmt(cfg))
    dop = DiscreteOperator.from_operator(op, grid)
    ell_max = float(np.max(np.abs(dop.ell)))
    h_sup = 0.0 if init is None else init.sup_norm()
    sups = np.max(np.abs(traj.values).reshape(len(traj.times), -1), axis=1)
    excess = float(np.max(sups - (traj.times * ell_max + h_sup)))
    ok = excess <= 1e-10 * max(1.0, ell_max * T + h_sup)
    summary = {"steps": traj.steps, "dt": traj.dt, "T": T, "final_sup": float(sups[-1]),
               "a_priori_bound_excess": excess, "a_priori_bound_ok": ok}
    files.append(_write_json(out / "summary.json", summary))
    return files, ok, summary


def _ergodic(cfg, out, st, seed):
    (op,) = cfg.operator_list()
    grid = cfg.grid()
    p = cfg.params
    res = st.run("vanishing_discount", ergodic_vanishing_discount, op, grid, p.get("schedule", DEFAULT_SCHEDULE),
                 float(p.get("tol", DEFAULT_TOL)), 0, p.get("method", "policy"))
    files = res.export(out / "vanishing_discount", _fmt(cfg))
    summary = {"U": res.U, "cell_residual": res.residual, "signed_limits": res.signed_limits}
    ok = True
    lt_cfg = p.get("long_time")
    if lt_cfg:
        lt_cfg = lt_cfg if isinstance(lt_cfg, dict) else {}
        try:
            lt = st.run("long_time", ergodic_long_time, op, grid, float(lt_cfg.get("T", 2.0)),
                        float(lt_cfg.get("window", 0.5)), float(lt_cfg.get("threshold", 1e-3)))
            files += lt.export(out / "long_time", _fmt(cfg))
            gap = abs(lt.U - res.U)
            summary.update({"U_long_time": lt.U, "agreement_gap": gap})
            ok = gap <= float(p.get("agreement_gap", AGREEMENT_GAP))
        except InconclusiveError as err:
            summary["long_time"] = f"inconclusive: {err}"
            ok = False
    files.append(_write_json(out / "summary.json", summary))
    return files, ok, summary


def _report_files(report, out):
    return [_write_json(out / "report.json", report.to_dict()), _csv(report, out / "report.csv")]


def _csv(report, path):
    report.to_csv(path)
    return Path(path)


def _compare_parabolic(cfg, out, st, seed):
    op1, op2 = cfg.operator_list()
    p = cfg.params
    coercivity = None
    if "coercivity" in p:
        coercivity = (float(p["coercivity"]["nu"]), list(p["coercivity"]["subset"]))
    grid = cfg.grid()
    rep = st.run("experiment", parabolic_dependence_experiment, op1, op2, grid, float(p["T"]),
                 cfg.shared_certificate(), initial=_initial(cfg, grid), c_slack=float(p.get("c_slack", C_SLACK)),
                 coercivity=coercivity, seed=seed)
    summary = {"verdict": rep.verdict, "witness_t": rep.witness_t,
               "final_empirical": float(rep.empirical_curve[-1]), "final_bound": float(rep.bound_curve[-1])}
    return _report_files(rep, out), rep.verdict != "violated", summary


def _compare_ergodic(cfg, out, st, seed):
    op1, op2 = cfg.operator_list()
    p = cfg.params
    lt = p.get("long_time") or {}
    rep = st.run("experiment", ergodic_dependence_experiment, op1, op2, cfg.grid(), cfg.shared_certificate(),
                 K=p.get("K"), schedule=p.get("schedule", DEFAULT_SCHEDULE), tol=float(p.get("tol", DEFAULT_TOL)),
                 T_long=float(lt.get("T", 2.0)), window=float(lt.get("window", 0.5)), seed=seed)
    summary = {"verdict": rep.verdict, "U1": rep.details["U1"], "U2": rep.details["U2"],
               "empirical": float(rep.empirical_curve[0]), "bound": float(rep.bound_curve[0]),
               "K_source": rep.constants.K_source}
    return _report_files(rep, out), rep.verdict != "violated", summary


def _effective(cfg, out, st, seed):
    ts = cfg.two_scale_operator()
    p = cfg.params
    grid_x = cfg.grid()
    grid_y = cfg.grid("grid_y") if "grid_y" in p else None
    traj = st.run("solve", solve_effective, ts, grid_x, float(p["T"]), grid_y,
                  int(p.get("store_every", 1)), p.get("save_times", ()))
    files = st.run("export", traj.export, out / "trajectory", _fmt(cfg))
    summary = {"steps": traj.steps, "dt": traj.dt}
    ok = True
    if p.get("structure_check"):
        sc = p["structure_check"] if isinstance(p["structure_check"], dict) else {}
        cache_path = sc.get("cache")
        cache = EffectiveHamiltonianCache(float(sc.get("step", 1e-3)), out / cache_path if cache_path else None)
        rep = st.run("structure_check", effective_structure_check, ts, int(sc.get("pairs", 12)), cache, seed=seed)
        summary["structure"] = {"passed": rep.passed, "K_bar": rep.K_bar, "C": rep.C, "pairs": rep.n_pairs,
                                "worst": rep.worst}
        ok = rep.passed
        if cache_path:
            files.append(out / cache_path)
    files.append(_write_json(out / "summary.json", summary))
    return files, ok, summary


def _two_scale(cfg, out, st, seed):
    ts = cfg.two_scale_operator()
    p = cfg.params
    traj = st.run("solve", solve_two_scale, ts, float(p["eps"]), cfg.grid(), float(p["T"]),
                  int(p.get("store_every", 1)), p.get("save_times", ()), float(p.get("dt_floor", DT_FLOOR)))
    files = st.run("export", traj.export, out / "trajectory", _fmt(cfg))
    summary = {"eps": float(p["eps"]), "steps": traj.steps, "dt": traj.dt}
    files.append(_write_json(out / "summary.json", summary))
    return files, True, summary


def _convergence(cfg, out, st, seed):
    ts = cfg.two_scale_operator()
    p = cfg.params
    table = st.run("study", convergence_study, ts, p["eps_list"], cfg.grid(), float(p["T"]),
                   int(p.get("n_checkpoints", 10)), float(p.get("dt_floor", DT_FLOOR)),
                   bool(p.get("shared_dt", False)))
    table.to_csv(out / "convergence.csv")
    summary = {"rows": table.rows, "monotone": table.monotone}
    files = [out / "convergence.csv", _write_json(out / "convergence.json", summary)]
    return files, table.monotone is not False, summary


DISPATCH = {
    "solve-parabolic": _solve_parabolic,
    "ergodic": _ergodic,
    "compare-parabolic": _compare_parabolic,
    "compare-ergodic": _compare_ergodic,
    "effective": _effective,
    "two-scale": _two_scale,
    "convergence-study": _convergence,
}


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(config: ExperimentConfig, out, workflow: str | None = None, seed: int = 0, threads: int = 1) -> RunManifest:
    """Validate, run one workflow, write its outputs and ``manifest.json`` under ``out``."""
    wf = workflow or config.workflow
    errors = [d for d in validate(config, wf) if d.level == "error"]
    if errors:
        raise ConfigurationError("invalid config:\n  " + "\n  ".join(str(d) for d in errors))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    st = _Stages()
    t0 = time.perf_counter()
    files, ok, summary = DISPATCH[wf](config, out, st, seed)
    wall = time.perf_counter() - t0
    inventory = []
    for f in sorted({Path(f) for f in files}):
        if f.exists():
            inventory.append({"path": str(f.relative_to(out)), "sha256": _sha256(f), "bytes": f.stat().st_size})
    manifest = RunManifest(wf, config.hash, __version__, bool(ok), wall, st.timings, inventory, summary,
                           {"seed": seed, "threads": threads, "source": config.source})
    _write_json(out / "manifest.json", manifest.to_dict())
    return manifest


def _parser():
    ap = argparse.ArgumentParser(prog="hjbilab", description="Monotone schemes for HJBI equations on the torus.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in list(WORKFLOWS) + ["validate"]:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path, help="YAML experiment file")
        if name != "validate":
            sp.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        sp.add_argument("--threads", type=int, default=1, help="thread budget for numerical libraries")
        sp.add_argument("--seed", type=int, default=0, help="seed for sampled checks")
        sp.add_argument("--quiet", action="store_true")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(args.threads))
    say = (lambda *a: None) if args.quiet else print
    try:
        cfg = load_config(args.config)
    except HJBILabError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    if args.command == "validate":
        diags = validate(cfg)
        for d in diags:
            print(d)
        return 2 if any(d.level == "error" for d in diags) else 0
    try:
        manifest = run(cfg, args.out, args.command, args.seed, args.threads)
    except HJBILabError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    say(json.dumps(_plain(manifest.summary), indent=2))
    say(f"{'ok' if manifest.ok else 'FAILED'}: {len(manifest.files)} files in {args.out}")
    return 0 if manifest.ok else 1


if __name__ == "__main__":
    sys.exit(main())
