import json
import shutil
from pathlib import Path

import pytest

from plapsing import cli

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL = ["grid.indices=[3]", "grid.n_r=64", "run.T=0.2", "run.save_every=5",
         "stepper.dt=0.02"]


@pytest.fixture
def config(tmp_path):
    dst = tmp_path / "reference.toml"
    shutil.copy(CONFIGS / "reference.toml", dst)
    return dst


def _run(args, capsys):
    code = cli.main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_validate_reference(config, tmp_path, capsys):
    code, out, _ = _run(["validate", config, "--out", tmp_path / "o"], capsys)
    assert code == 0
    assert "R = lambda'/lambda = 1.6" in out and "min_K" in out and "theta" in out


def test_validate_bad_lambda_prime(config, capsys):
    code, _, err = _run(["validate", config, "--set", "exponents.lambda_prime=1.0"], capsys)
    assert code == 1 and "lambda' < 1" in err


def test_missing_field(tmp_path, capsys):
    text = (CONFIGS / "reference.toml").read_text().replace("k_prime = 1.0\n", "")
    path = tmp_path / "c.toml"
    path.write_text(text)
    code, _, err = _run(["validate", path], capsys)
    assert code == 1 and "exponents.k_prime" in err


def test_unknown_field_and_syntax_error(tmp_path, config, capsys):
    code, _, err = _run(["validate", config, "--set", "grid.cells=3"], capsys)
    assert code == 1 and "grid.cells" in err
    bad = tmp_path / "bad.toml"
    bad.write_text("[exponents]\nn = = 2\n")
    code, _, err = _run(["validate", bad], capsys)
    assert code == 1 and "line 2" in err


def test_tune_is_byte_identical(config, tmp_path, capsys):
    out = tmp_path / "o"
    assert _run(["tune", config, "--out", out], capsys)[0] == 0
    first = (out / "params.json").read_bytes()
    cert = json.loads((out / "reports" / "certification.json").read_text())
    assert cert["passed"] and all(c["anchor"] for c in cert["checks"])
    assert _run(["tune", config, "--out", out], capsys)[0] == 0
    assert (out / "params.json").read_bytes() == first


def test_tune_failure_is_reported(config, tmp_path, capsys):
    out = tmp_path / "o"
    code, stdout, _ = _run(["tune", config, "--out", out, "--set", "tuning.A_doublings=2"], capsys)
    assert code == 1
    fail = json.loads((out / "reports" / "tune_failure.json").read_text())
    assert fail["check"] in ("super_outer", "sub_outer") and fail["anchor"]


def test_simulate_needs_params(config, tmp_path, capsys):
    code, _, err = _run(["simulate", config, "--out", tmp_path / "o"], capsys)
    assert code == 1 and "params" in err


def test_pipeline_is_deterministic(config, tmp_path, capsys):
    out = tmp_path / "o"
    args = ["--out", out] + [x for s in SMALL for x in ("--set", s)]
    assert _run(["run", config] + args, capsys)[0] in (0, 1)
    first = json.loads((out / "manifest.json").read_text())["sha256"]
    assert any(k.startswith("snapshots/") for k in first)
    shutil.rmtree(out)
    _run(["run", config] + args, capsys)
    assert json.loads((out / "manifest.json").read_text())["sha256"] == first
    summary = json.loads((out / "reports" / "summary.json").read_text())
    assert all(row["anchor"] for row in summary["checks"])
    analysis = json.loads((out / "reports" / "analysis.json").read_text())
    assert set(analysis["runs"]) == {"i3_sub", "i3_super"}
    assert analysis["runs"]["i3_super"]["sandwich"]["passed"]


def test_inadmissible_curve_rejected(config, tmp_path, capsys):
    out = tmp_path / "o"
    _run(["tune", config, "--out", out], capsys)
    code, stdout, _ = _run(["simulate", config, "--out", out, "--set", "grid.n_theta=8",
                            "--set", 'curve={name="linear", w=[1.0, 0.0]}'], capsys)
    assert code == 1 and "speed bound" in stdout


def test_numerical_failure_exit_code(config, tmp_path, capsys):
    out = tmp_path / "o"
    _run(["tune", config, "--out", out], capsys)
    args = [x for s in SMALL for x in ("--set", s)]
    code, _, err = _run(["simulate", config, "--out", out, "--set", 'stepper.scheme="explicit"',
                         "--set", "stepper.dt=0.1"] + args[:-2], capsys)
    assert code == 2 and "StabilityError" in err
