import hashlib
import json
import re
import subprocess
import sys
import time

import numpy as np
import pytest

from hjbilab.cli import main, run
from hjbilab.config import load_config, parse_config, shipped_configs
from hjbilab.discretization import GridFunction
from hjbilab.errors import ConfigurationError

CONFIGS = {p.stem: p for p in shipped_configs()}


def budget(path):
    return float(re.search(r"# Time budget: ([0-9.]+) s", path.read_text()).group(1))


@pytest.mark.parametrize("name", sorted(CONFIGS))
def test_shipped_config_runs_within_budget(name, tmp_path):
    path = CONFIGS[name]
    t0 = time.perf_counter()
    manifest = run(load_config(path), tmp_path)
    assert time.perf_counter() - t0 <= budget(path)
    assert manifest.ok
    data = json.loads((tmp_path / "manifest.json").read_text())
    assert data["files"] and data["config_hash"] == load_config(path).hash


def test_constant_cost_outputs_exact_final_layer(tmp_path):
    run(load_config(CONFIGS["constant_cost"]), tmp_path)
    manifest = json.loads((tmp_path / "trajectory" / "manifest.json").read_text())
    final = GridFunction.from_binary(tmp_path / "trajectory" / manifest["layers"][-1])
    np.testing.assert_allclose(final.values, -0.7 * 2.0, atol=1e-12)


def test_shift_comparison_reports_holds(tmp_path):
    run(load_config(CONFIGS["compare_ergodic_shift"]), tmp_path)
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["verdict"] == "holds"
    assert report["empirical"][0] == pytest.approx(0.1, abs=1e-6)


def test_manifest_hashes_match_files(tmp_path):
    run(load_config(CONFIGS["heat"]), tmp_path)
    data = json.loads((tmp_path / "manifest.json").read_text())
    for entry in data["files"]:
        blob = (tmp_path / entry["path"]).read_bytes()
        assert hashlib.sha256(blob).hexdigest() == entry["sha256"] and len(blob) == entry["bytes"]


def test_runs_are_deterministic(tmp_path):
    cfg = load_config(CONFIGS["compare_parabolic_drift"])
    manifests = []
    for sub in ("a", "b"):
        run(cfg, tmp_path / sub)
        m = json.loads((tmp_path / sub / "manifest.json").read_text())
        m.pop("wall_clock_seconds")
        m.pop("timings")
        manifests.append(m)
    assert manifests[0] == manifests[1]


def test_run_refuses_invalid_config(tmp_path):
    text = CONFIGS["compare_ergodic_shift"].read_text().replace("[cosine, cosine_shifted]", "[cosine, missing]")
    with pytest.raises(ConfigurationError, match=r"experiment.operators\[1\]"):
        run(parse_config(text), tmp_path)


def test_exit_codes(tmp_path, capsys):
    assert main(["validate", "--config", str(CONFIGS["heat"])]) == 0
    assert main(["solve-parabolic", "--config", str(CONFIGS["constant_cost"]), "--out", str(tmp_path / "ok"),
                 "--quiet"]) == 0
    bad = tmp_path / "bad.yaml"
    bad.write_text(CONFIGS["compare_ergodic_shift"].read_text().replace("[cosine, cosine_shifted]", "[cosine, x]"))
    assert main(["validate", "--config", str(bad)]) == 2
    assert main(["compare-ergodic", "--config", str(bad), "--out", str(tmp_path / "bad")]) == 2
    assert "experiment.operators[1]" in capsys.readouterr().err
    strict = tmp_path / "strict.yaml"
    strict.write_text(CONFIGS["cosine_ergodic"].read_text().replace("grid: [256]", "grid: [32]\nagreement_gap: 1.0e-15"))
    assert main(["ergodic", "--config", str(strict), "--out", str(tmp_path / "strict"), "--quiet"]) == 1
    assert json.loads((tmp_path / "strict" / "manifest.json").read_text())["ok"] is False


def test_command_must_match_config_workflow(tmp_path):
    assert main(["ergodic", "--config", str(CONFIGS["heat"]), "--out", str(tmp_path)]) == 2


def test_console_script_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hjbilab.cli", "solve-parabolic", "--config",
                           str(CONFIGS["constant_cost"]), "--out", str(tmp_path), "--threads", "1", "--seed", "3"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "ok:" in proc.stdout
    settings = json.loads((tmp_path / "manifest.json").read_text())["settings"]
    assert settings["seed"] == 3 and settings["threads"] == 1
