import pytest

from hjbilab.config import load_config, parse_config, shipped_configs, validate
from hjbilab.errors import ConfigurationError, ExpressionError

SHIFT = """\
kind: operator
name: base
sigma: [["1"]]
drift: ["0"]
cost: "cos(2*pi*x1)"
---
kind: operator
name: shifted
sigma: [["1"]]
drift: ["0"]
cost: "cos(2*pi*x1) + 0.1"
---
kind: experiment
workflow: compare-ergodic
operators: [base, shifted]
grid: [32]
"""


def errors(diags):
    return [d for d in diags if d.level == "error"]


@pytest.mark.parametrize("path", shipped_configs(), ids=lambda p: p.stem)
def test_shipped_configs_validate_cleanly(path):
    assert validate(load_config(path)) == []


def test_parse_collects_operators_and_parameters():
    cfg = parse_config(SHIFT)
    assert cfg.workflow == "compare-ergodic"
    assert [op.name for op in cfg.operator_list()] == ["base", "shifted"]
    assert cfg.grid().sizes == (32,)
    assert len(cfg.hash) == 64


def test_missing_operator_names_the_field():
    cfg = parse_config(SHIFT.replace("operators: [base, shifted]", "operators: [base, nothere]"))
    (d,) = errors(validate(cfg))
    assert d.path == "experiment.operators[1]" and "nothere" in d.message


def test_expression_error_reports_file_position():
    text = SHIFT.replace('cost: "cos(2*pi*x1) + 0.1"', 'cost: "cos(2*pi*x1) + * 0.1"')
    with pytest.raises(ExpressionError) as info:
        parse_config(text)
    # line 11; the '*' is the 16th character inside the quotes, which open at column 7
    assert (info.value.line, info.value.column) == (11, 7 + 16)


def test_dimension_mismatch_cites_the_coefficient():
    text = SHIFT.replace('name: shifted\nsigma: [["1"]]', 'name: shifted\nsigma: [["1"], ["0"]]')
    with pytest.raises(ConfigurationError, match="shifted"):
        parse_config(text)
    text = SHIFT.replace('grid: [32]', 'grid: [8, 8]')
    (d,) = errors(validate(parse_config(text)))[:1]
    assert d.path == "experiment.grid" and "dimension" in d.message


def test_non_dominant_sigma_is_an_error_on_the_coefficient():
    text = SHIFT.replace('name: base\nsigma: [["1"]]\ndrift: ["0"]\ncost: "cos(2*pi*x1)"',
                         'name: base\nsigma: [["1", "0"], ["0.9", "0.1"]]\ndrift: ["0", "0"]\ncost: "0"')
    text = text.replace('name: shifted\nsigma: [["1"]]\ndrift: ["0"]\ncost: "cos(2*pi*x1) + 0.1"',
                        'name: shifted\nsigma: [["1", "0"], ["0", "1"]]\ndrift: ["0", "0"]\ncost: "0"')
    text = text.replace("grid: [32]", "grid: [8, 8]")
    diags = errors(validate(parse_config(text)))
    assert diags and diags[0].path == "operator 'base'.sigma"


@pytest.mark.parametrize("edit, path", [
    (("grid: [32]", "grid: [32]\nT: -1"), "experiment.T"),
    (("grid: [32]", "grid: [32]\nschedule: [0.01, 0.1]"), "experiment.schedule"),
    (("workflow: compare-ergodic", "workflow: solve-parabolic\nT: 1"), "experiment.operators"),
    (("workflow: compare-ergodic", "workflow: nope"), "experiment.workflow"),
])
def test_invalid_parameters_are_reported(edit, path):
    diags = errors(validate(parse_config(SHIFT.replace(*edit))))
    assert path in [d.path for d in diags]


def test_missing_required_field_for_workflow():
    text = SHIFT.replace("workflow: compare-ergodic", "workflow: compare-parabolic")
    assert "experiment.T" in [d.path for d in errors(validate(parse_config(text)))]


def test_tiny_eps_warns_with_suggested_grid():
    path = [p for p in shipped_configs() if p.stem == "homog_two_scale"][0]
    text = path.read_text().replace("eps: 0.1", "eps: 1.0e-5")
    (d,) = validate(parse_config(text))
    assert d.level == "warning" and d.path == "experiment.eps" and "try fast grid" in d.message


def test_duplicate_names_and_unknown_kinds_are_rejected():
    with pytest.raises(ConfigurationError, match="duplicate"):
        parse_config(SHIFT.replace("name: shifted", "name: base"))
    with pytest.raises(ConfigurationError, match="unknown kind"):
        parse_config("kind: banana\n")


def test_certificate_blocks_are_combined():
    text = SHIFT.replace('cost: "cos(2*pi*x1)"\n', 'cost: "cos(2*pi*x1)"\ncertificate: {C: 1, C_sigma: 0.5}\n')
    text = text.replace('cost: "cos(2*pi*x1) + 0.1"\n', 'cost: "cos(2*pi*x1) + 0.1"\ncertificate: {C: 2, C_f: 1}\n')
    cert = parse_config(text).shared_certificate()
    assert (cert.C, cert.C_sigma, cert.C_f) == (2, 0.5, 1)
    assert parse_config(SHIFT).shared_certificate() is None
