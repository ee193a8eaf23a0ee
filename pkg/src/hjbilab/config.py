"""YAML experiment files.

A file holds several YAML documents, each with a ``kind``:

``operator``
    name, sigma (list of rows), drift (list), cost, controls {A, B},
    optional certificate.
``two_scale_operator``
    name, Xi, Sigma, G, F, L, h, nu, controls {A, B}.
``experiment``
    workflow, operators (list of names) or two_scale (a name), grid, and
    workflow parameters (T, schedule, eps, ...).

Expression strings keep their position in the file, so a malformed
coefficient is reported with line and column.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import expressions as ex
from .discretization import DiscreteOperator, Grid, cfl_timestep
from .errors import AdmissibilityError, ConfigurationError, ExpressionError
from .operator_model import CoefficientField, ControlSet, HJBIOperator, RegularityCertificate
from .homogenization import DT_FLOOR, TwoScaleOperator

WORKFLOWS = {
    "solve-parabolic": {"operators": 1, "needs": ("grid", "T")},
    "ergodic": {"operators": 1, "needs": ("grid",)},
    "compare-parabolic": {"operators": 2, "needs": ("grid", "T")},
    "compare-ergodic": {"operators": 2, "needs": ("grid",)},
    "effective": {"two_scale": True, "needs": ("grid", "T")},
    "two-scale": {"two_scale": True, "needs": ("grid", "T", "eps")},
    "convergence-study": {"two_scale": True, "needs": ("grid", "T", "eps_list")},
}


class LocStr(str):
    """String scalar remembering where it sits in the YAML source."""

    line: int = 0
    column: int = 0
    quoted: bool = False


class _Loader(yaml.SafeLoader):
    pass


def _construct_str(loader, node):
    s = LocStr(loader.construct_scalar(node))
    s.line = node.start_mark.line + 1
    s.column = node.start_mark.column + 1
    s.quoted = node.style in ("'", '"')
    return s


_Loader.add_constructor("tag:yaml.org,2002:str", _construct_str)


def parse_expr(value, path):
    """Parse one coefficient, relocating syntax errors to the file position."""
    try:
        return ex.parse(value)
    except ExpressionError as err:
        if isinstance(value, LocStr) and value.line:
            raise err.located(value.line, value.column - 1 + int(value.quoted)) from None
        raise ExpressionError(f"{path}: {err.message}", err.column, err.line, err.source) from None


def _expr_tree(value, path):
    if isinstance(value, (list, tuple)):
        return [_expr_tree(v, f"{path}[{i}]") for i, v in enumerate(value)]
    return parse_expr(value, path)


def _controls(doc, path):
    ctr = doc.get("controls") or {}
    if not isinstance(ctr, dict):
        raise ConfigurationError(f"{path}.controls must be a mapping with keys A and B")
    out = {}
    for key in ("A", "B"):
        pts = ctr.get(key)
        out[key] = ControlSet.singleton(key) if pts is None else ControlSet(np.asarray(pts, dtype=float), key)
    return out["A"], out["B"]


def _require(doc, key, path):
    if key not in doc:
        raise ConfigurationError(f"{path}: missing field '{key}'")
    return doc[key]


def operator_from_dict(doc, path="operator"):
    name = str(_require(doc, "name", path))
    sigma = _expr_tree(_require(doc, "sigma", path), f"{path}.sigma")
    drift = _expr_tree(_require(doc, "drift", path), f"{path}.drift")
    cost = parse_expr(_require(doc, "cost", path), f"{path}.cost")
    if not isinstance(sigma, list) or not all(isinstance(r, list) for r in sigma):
        raise ConfigurationError(f"{path}.sigma must be a list of rows")
    A, B = _controls(doc, path)
    try:
        op = HJBIOperator.from_text(sigma, drift, cost, A, B, name)
    except ConfigurationError as err:
        raise ConfigurationError(f"{path} ({name}): {err}") from None
    if "dim" in doc and int(doc["dim"]) != op.n:
        raise ConfigurationError(f"{path}.sigma: operator '{name}' declares dim {doc['dim']} "
                                 f"but sigma has {op.n} rows")
    return op


def two_scale_from_dict(doc, path="two_scale_operator"):
    name = str(_require(doc, "name", path))
    fields = {k: _expr_tree(_require(doc, k, path), f"{path}.{k}") for k in ("Xi", "Sigma", "G", "F")}
    L = parse_expr(_require(doc, "L", path), f"{path}.L")
    h = parse_expr(doc.get("h", 0), f"{path}.h")
    A, B = _controls(doc, path)
    try:
        return TwoScaleOperator.from_text(fields["Xi"], fields["Sigma"], fields["G"], fields["F"], L, h,
                                          A, B, float(doc.get("nu", 0.0)), name)
    except ConfigurationError as err:
        raise ConfigurationError(f"{path} ({name}): {err}") from None


def certificate_from_dict(doc, path="certificate"):
    try:
        return RegularityCertificate.from_dict(doc)
    except (TypeError, ConfigurationError) as err:
        raise ConfigurationError(f"{path}: {err}") from None


@dataclass
class ExperimentConfig:
    """Everything needed to run one experiment."""

    workflow: str | None
    params: dict
    operators: dict = field(default_factory=dict)
    certificates: dict = field(default_factory=dict)
    two_scale: dict = field(default_factory=dict)
    text: str = ""
    source: str = "<string>"

    @property
    def hash(self):
        return hashlib.sha256(self.text.encode()).hexdigest()

    def operator_list(self):
        names = self.params.get("operators") or []
        return [self.operators[n] for n in names]

    def two_scale_operator(self):
        return self.two_scale[self.params["two_scale"]]

    def grid(self, key="grid"):
        spec = self.params[key]
        if isinstance(spec, dict):
            spec = spec["sizes"]
        return Grid(tuple(int(s) for s in np.atleast_1d(spec)))

    def shared_certificate(self):
        """The experiment-level certificate, else the componentwise max of declared ones."""
        if "certificate" in self.params:
            return certificate_from_dict(self.params["certificate"], "experiment.certificate")
        names = self.params.get("operators") or []
        certs = [self.certificates[n] for n in names if n in self.certificates]
        if not certs or len(certs) < len(names):
            return None
        out = certs[0]
        for c in certs[1:]:
            out = out.combine(c)
        return out


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        docs = [d for d in yaml.load_all(text, Loader=_Loader) if d is not None]
    except yaml.YAMLError as err:
        raise ConfigurationError(f"{source}: invalid YAML: {err}") from None
    cfg = ExperimentConfig(None, {}, text=text, source=source)
    experiments = []
    for k, doc in enumerate(docs):
        path = f"document[{k}]"
        if not isinstance(doc, dict) or "kind" not in doc:
            raise ConfigurationError(f"{path}: every document needs a 'kind' field")
        kind = doc["kind"]
        if kind == "operator":
            op = operator_from_dict(doc, f"{path} (operator)")
            if op.name in cfg.operators:
                raise ConfigurationError(f"{path}: duplicate operator name '{op.name}'")
            cfg.operators[op.name] = op
            if "certificate" in doc:
                cfg.certificates[op.name] = certificate_from_dict(doc["certificate"], f"{path}.certificate")
        elif kind == "two_scale_operator":
            ts = two_scale_from_dict(doc, f"{path} (two_scale_operator)")
            cfg.two_scale[ts.name] = ts
        elif kind == "experiment":
            experiments.append(doc)
        else:
            raise ConfigurationError(f"{path}.kind: unknown kind '{kind}'")
    if len(experiments) > 1:
        raise ConfigurationError("a config file holds exactly one experiment document")
    if experiments:
        cfg.params = {str(k): v for k, v in experiments[0].items() if k != "kind"}
        cfg.workflow = cfg.params.get("workflow")
    return cfg


def shipped_configs() -> list:
    """Paths of the example configurations installed with the package."""
    root = resources.files("hjbilab") / "configs"
    return sorted(Path(str(p)) for p in root.iterdir() if p.name.endswith(".yaml"))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


# --------------------------------------------------------------------------
# validation


@dataclass
class Diagnostic:
    level: str  # "error" | "warning"
    path: str
    message: str

    def __str__(self):
        return f"{self.level}: {self.path}: {self.message}"


def _positive(params, key, diags, path="experiment"):
    if key in params:
        try:
            ok = float(params[key]) > 0
        except (TypeError, ValueError):
            ok = False
        if not ok:
            diags.append(Diagnostic("error", f"{path}.{key}", f"must be a positive number, got {params[key]!r}"))


def validate(config, workflow: str | None = None) -> list:
    """Static checks without running any solve; returns a list of diagnostics."""
    if not isinstance(config, ExperimentConfig):
        try:
            config = load_config(config)
        except ConfigurationError as err:
            return [Diagnostic("error", "config", str(err))]
    diags = []
    p = config.params
    wf = workflow or config.workflow
    if not p:
        return [Diagnostic("error", "experiment", "no experiment document")]
    if wf is None:
        return [Diagnostic("error", "experiment.workflow", "missing workflow")]
    if wf not in WORKFLOWS:
        return [Diagnostic("error", "experiment.workflow", f"unknown workflow '{wf}' (known: {', '.join(WORKFLOWS)})")]
    if config.workflow is not None and workflow is not None and config.workflow != workflow:
        diags.append(Diagnostic("error", "experiment.workflow",
                                f"config is for '{config.workflow}', command asked for '{workflow}'"))
    spec = WORKFLOWS[wf]
    for key in spec["needs"]:
        if key not in p:
            diags.append(Diagnostic("error", f"experiment.{key}", f"required by workflow '{wf}'"))
    for key in ("T", "tol", "eps", "c_slack", "K", "dt_floor"):
        _positive(p, key, diags)
    for key in ("schedule", "eps_list"):
        if key in p:
            vals = p[key]
            if not isinstance(vals, list) or not vals or any(not isinstance(v, (int, float)) or v <= 0 for v in vals):
                diags.append(Diagnostic("error", f"experiment.{key}", "must be a list of positive numbers"))
            elif any(b >= a for a, b in zip(vals, vals[1:])):
                diags.append(Diagnostic("error", f"experiment.{key}", "must be strictly decreasing"))
    if diags:
        return diags

    try:
        grid = config.grid()
    except (ConfigurationError, TypeError, ValueError, KeyError) as err:
        return [Diagnostic("error", "experiment.grid", str(err))]

    if spec.get("operators"):
        names = p.get("operators")
        if not isinstance(names, list) or len(names) != spec["operators"]:
            return diags + [Diagnostic("error", "experiment.operators",
                                       f"workflow '{wf}' needs a list of {spec['operators']} operator name(s)")]
        for i, name in enumerate(names):
            if name not in config.operators:
                known = ", ".join(sorted(config.operators)) or "none"
                diags.append(Diagnostic("error", f"experiment.operators[{i}]",
                                        f"unknown operator '{name}' (defined: {known})"))
        if diags:
            return diags
        ops = config.operator_list()
        for i, op in enumerate(ops):
            where = f"operator '{op.name}'"
            if op.n != grid.n:
                diags.append(Diagnostic("error", "experiment.grid",
                                        f"{where} has dimension {op.n}, grid has {grid.n}"))
                continue
            try:
                dop = DiscreteOperator.from_operator(op, grid)
            except AdmissibilityError as err:
                diags.append(Diagnostic("error", f"{where}.sigma", str(err)))
                continue
            except ConfigurationError as err:
                diags.append(Diagnostic("error", where, str(err)))
                continue
            if "T" in p:
                steps = float(p["T"]) / cfl_timestep(dop)
                if steps > 5e6:
                    diags.append(Diagnostic("warning", "experiment.T",
                                            f"{where} needs about {steps:.3g} explicit steps; consider a coarser grid"))
        if len(ops) == 2 and not diags:
            a, b = ops
            if a.A != b.A or a.B != b.B:
                diags.append(Diagnostic("error", "experiment.operators", "compared operators must share control sets"))
            if a.p_dim != b.p_dim:
                diags.append(Diagnostic("error", "experiment.operators", "compared operators have different noise dimensions"))
        if "certificate" in p:
            try:
                certificate_from_dict(p["certificate"], "experiment.certificate")
            except ConfigurationError as err:
                diags.append(Diagnostic("error", "experiment.certificate", str(err)))
        return diags

    name = p.get("two_scale")
    if name not in config.two_scale:
        known = ", ".join(sorted(config.two_scale)) or "none"
        return diags + [Diagnostic("error", "experiment.two_scale", f"unknown two-scale operator '{name}' (defined: {known})")]
    ts = config.two_scale[name]
    ok, msg = ts.check_periodicity()
    if not ok:
        diags.append(Diagnostic("error", f"two_scale '{name}'", msg))
    if wf == "effective":
        if grid.n != ts.n:
            diags.append(Diagnostic("error", "experiment.grid", f"effective solves use the slow grid (dimension {ts.n})"))
        return diags
    if grid.n != ts.n + ts.m:
        return diags + [Diagnostic("error", "experiment.grid", f"two-scale solves need a product grid of dimension {ts.n + ts.m}")]
    eps_values = [float(p["eps"])] if wf == "two-scale" else [float(e) for e in p["eps_list"]]
    floor = float(p.get("dt_floor", DT_FLOOR))
    for eps in eps_values:
        try:
            dt = cfl_timestep(DiscreteOperator.from_operator(ts.product_operator(eps), grid))
        except AdmissibilityError as err:
            diags.append(Diagnostic("error", f"two_scale '{name}'", f"eps = {eps:g}: {err}"))
            continue
        if dt < floor:
            fast = grid.sizes[ts.n:]
            factor = np.sqrt(dt / floor)
            suggestion = [max(4, int(s * factor)) for s in fast]
            diags.append(Diagnostic("warning", "experiment.eps",
                                    f"eps = {eps:g} gives a stable step {dt:.3g} below the floor {floor:.3g}; "
                                    f"try fast grid {suggestion} or a larger eps"))
    return diags
