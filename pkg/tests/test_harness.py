import json
import subprocess
import sys

import numpy as np
import pytest

from blockspin.harness import (
    SUITE_RUNNERS,
    SUITES,
    ConfigError,
    ExperimentConfig,
    main,
    step_instance,
)


def test_default_config_is_valid():
    cfg = ExperimentConfig.from_file(None)
    assert cfg.n == 8 and cfg.d == 1
    assert set(SUITE_RUNNERS) == set(SUITES)


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[geometry]\nL = 2\nd = 1\n[run]\nsuites = flows, renorm\ntol = 1e-10\n[decay]\ndecay_m = 2 3\n")
    cfg = ExperimentConfig.from_file(path, {"seed": 11})
    assert cfg.suites == ("flows", "renorm")
    assert cfg.tol == 1e-10 and cfg.seed == 11
    assert cfg.decay_m == (2, 3)
    assert cfg.content_hash() != ExperimentConfig().content_hash()


@pytest.mark.parametrize(
    "text",
    [
        "[geometry]\nL = 1\n",
        "[geometry]\nbogus = 3\n",
        "[nowhere]\nL = 2\n",
        "[params]\nlam = two\n",
        "[run]\nsuites = flows, nonsense\n",
        "L = 2\n",
        "[geometry]\nmvol = 9\nd = 3\n",
    ],
    ids=["small-L", "unknown-key", "unknown-section", "bad-float", "bad-suite", "no-section", "infeasible"],
)
def test_malformed_config_exits_without_output(tmp_path, text, capsys):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    out = tmp_path / "out"
    assert main(["verify", "--config", str(path), "--out", str(out)]) == 2
    assert not out.exists()
    assert "config error" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(tmp_path / "absent.ini")


def test_default_verify_passes(tmp_path):
    out = tmp_path / "out"
    assert main(["verify", "--out", str(out), "--seed", "1"]) == 0
    doc = json.loads((out / "verify.json").read_text())
    assert doc["summary"]["passed"] is True
    assert doc["config_hash"] == ExperimentConfig(seed=1).content_hash()
    residuals = list(doc["summary"]["checks"].values())
    assert residuals and max(residuals) < 1e-11


def test_zero_tolerance_fails(tmp_path):
    out = tmp_path / "out"
    assert main(["verify", "--out", str(out), "--tol", "0"]) != 0
    assert json.loads((out / "verify.json").read_text())["summary"]["failed"]


def test_same_seed_same_bytes(tmp_path):
    for name in ("a", "b"):
        assert main(["flow", "--out", str(tmp_path / name), "--seed", "5"]) == 0
    for table in ("flow.csv", "couplings.csv"):
        assert (tmp_path / "a" / table).read_bytes() == (tmp_path / "b" / table).read_bytes()


def test_decay_scan_reports_rates(tmp_path):
    out = tmp_path / "out"
    assert main(["decay", "--out", str(out)]) == 0
    summary = json.loads((out / "decay.json").read_text())["summary"]
    assert all(g > 0 for g in summary["gamma_hat"].values())
    assert isinstance(summary["gamma_nondecreasing"], bool)
    assert (out / "decay.csv").read_text().startswith("m,M,gamma_hat_G")


def test_cluster_report(tmp_path):
    out = tmp_path / "out"
    assert main(["cluster", "--out", str(out), "--seed", "2"]) == 0
    s = json.loads((out / "cluster.json").read_text())["summary"]
    assert s["relative_gap"] < 1e-8
    assert s["xi_expansion"] == pytest.approx(s["xi_bruteforce"], rel=1e-8)


def test_polymer_tables(tmp_path):
    out = tmp_path / "out"
    assert main(["polymers", "--out", str(out)]) == 0
    s = json.loads((out / "polymers.json").read_text())["summary"]
    assert s["cayley_exact"] is True
    assert s["size_histogram"]["1"] == 16


def test_report_aggregates_runs(tmp_path):
    out = tmp_path / "out"
    main(["flow", "--out", str(out)])
    main(["polymers", "--out", str(out)])
    assert main(["report", "--out", str(out)]) == 0
    runs = json.loads((out / "report.json").read_text())["summary"]["runs"]
    assert set(runs) == {"flow", "polymers"}
    assert "flow,lambda_final," in (out / "report.csv").read_text()


def test_step_instance_shapes():
    cfg = ExperimentConfig()
    step, lam = step_instance(cfg, 2)
    g = step.geometry
    # raised until four cubes fit at the next scale
    assert g.n // g.L ** g.cube_exponent(3) >= 4
    assert 0 < len(step.next_sites) < g.n_sites
    assert lam.volume() > 0


def test_console_entry_point(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "blockspin.harness", "verify", "--out", str(tmp_path), "--config", str(tmp_path / "nope.ini")],
        capture_output=True,
        text=True,
    )
    assert res.returncode == 2
    assert not (tmp_path / "verify.json").exists()


@pytest.mark.parametrize("name", SUITES)
def test_each_suite_below_default_tolerance(name):
    cfg = ExperimentConfig()
    vals = SUITE_RUNNERS[name](cfg, np.random.default_rng(0))
    assert vals and max(vals.values()) <= cfg.tol


def test_shipped_config_matches_defaults():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "default.ini"
    assert ExperimentConfig.from_file(path) == ExperimentConfig()
