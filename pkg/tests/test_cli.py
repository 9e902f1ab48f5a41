import csv
import json
import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from knnr.cli import FAULT_ENV_VAR, main, run_oracle_checks
from knnr.core import load_dataset


def _write_config(path, **sections):
    path.write_text(json.dumps(sections), encoding="utf-8")
    return str(path)


SMOKE = dict(
    env={"id": "lqr"},
    estimators={"knnr": {}, "na": {}},
    experiment={"n_grid": [100], "repetitions": 2, "master_seed": 3, "ground_truth_budget": 2000, "workers": 1},
)


# ------------------------------------------------------------------ generate


def test_generate_lqr(tmp_path, capsys):
    code = main(["generate", "--out", str(tmp_path), "--seed", "1", "--set", "behavior.n=100"])
    assert code == 0
    assert "100 episodes, 1000 transitions" in capsys.readouterr().out
    d = load_dataset(tmp_path / "dataset.npz")
    assert d.n == 100 and d.n_transitions == 1000
    assert (tmp_path / "config.json").exists()


def test_generate_bp(tmp_path, capsys):
    cfg = _write_config(tmp_path / "c.json", env={"id": "bp"}, behavior={"n": 10})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path), "--name", "bp.json"]) == 0
    assert "10 episodes, 300 transitions" in capsys.readouterr().out
    assert load_dataset(tmp_path / "bp.json").n_transitions == 300


def test_invalid_env_exits_2(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path), "--set", "env.id=cartpole"]) == 2
    err = capsys.readouterr().err
    assert "bp" in err and "lob" in err and "lqr" in err


@pytest.mark.parametrize(
    "argv,code",
    [
        (["generate", "--set", "nonsense"], 2),
        (["generate", "--set", "colour.x=1"], 2),
        (["generate", "--set", "behavior.n=0"], 2),
        (["generate", "--config", "/nonexistent/config.json"], 4),
        (["evaluate", "--dataset", "/nonexistent/d.npz"], 4),
        (["generate", "--workers", "0"], 2),
    ],
)
def test_config_errors(tmp_path, argv, code):
    assert main(argv + ["--out", str(tmp_path)]) == code


def test_malformed_config_json(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path)]) == 2


# ------------------------------------------------------------------ evaluate


@pytest.fixture
def lqr_file(tmp_path):
    main(["generate", "--out", str(tmp_path), "--seed", "2", "--set", "behavior.n=100"])
    return tmp_path / "dataset.npz"


def test_evaluate_na(lqr_file, capsys):
    capsys.readouterr()
    assert main(["evaluate", "--dataset", str(lqr_file), "--estimator", "na"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["value"] == pytest.approx(float(np.mean(load_dataset(lqr_file).returns())), rel=1e-12)


def test_evaluate_knnr_deterministic(lqr_file, capsys, tmp_path):
    values = []
    for _ in range(2):
        capsys.readouterr()
        assert main(["evaluate", "--dataset", str(lqr_file), "--estimator", "knnr", "--out", str(tmp_path / "ev")]) == 0
        values.append(json.loads(capsys.readouterr().out)["value"])
    assert values[0] == values[1]
    assert json.loads((tmp_path / "ev" / "estimate.json").read_text())["value"] == values[0]


def test_evaluate_peis_without_density(lqr_file, capsys):
    code = main(["evaluate", "--dataset", str(lqr_file), "--estimator", "peis", "--set", 'behavior.density="none"'])
    assert code == 3
    assert "support/density unavailable" in capsys.readouterr().err


def test_evaluate_env_mismatch(lqr_file):
    assert main(["evaluate", "--dataset", str(lqr_file), "--estimator", "na", "--set", "env.id=bp"]) == 2


# ----------------------------------------------------------------- benchmark


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_benchmark_smoke_plot_and_rerun(tmp_path):
    cfg = _write_config(tmp_path / "smoke.json", **SMOKE)
    out1 = tmp_path / "run1"
    assert main(["benchmark", "--config", cfg, "--out", str(out1), "--plot"]) == 0
    rows = _rows(out1 / "results.csv")
    assert len(rows) == 4
    assert {(r["estimator"], r["rep"]) for r in rows} == {("knnr", "0"), ("knnr", "1"), ("na", "0"), ("na", "1")}
    for name in ("mse.svg", "std.svg", "runtime.svg"):
        assert ET.parse(out1 / name).getroot().tag.endswith("svg")

    # rerun from the echoed config
    out2 = tmp_path / "run2"
    assert main(["benchmark", "--config", str(out1 / "config.json"), "--out", str(out2)]) == 0
    for name in ("results.csv", "aggregates.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_plot_from_results(tmp_path):
    cfg = _write_config(tmp_path / "smoke.json", **SMOKE)
    assert main(["benchmark", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert main(["plot", "--results", str(tmp_path / "b" / "results.csv"), "--out", str(tmp_path / "p")]) == 0
    assert sorted(p.name for p in (tmp_path / "p").glob("*.svg")) == ["mse.svg", "runtime.svg", "std.svg"]


# -------------------------------------------------------------- oracle check


def test_oracle_check_passes(capsys):
    t0 = time.perf_counter()
    assert main(["oracle-check"]) == 0
    assert time.perf_counter() - t0 < 60
    out = capsys.readouterr().out
    assert "PASS subsampling_identity" in out and "PASS nn_index" in out


@pytest.mark.parametrize("fault", ["subsampling_identity", "nn_index"])
def test_oracle_check_fault_injection(fault, monkeypatch, capsys):
    monkeypatch.setenv(FAULT_ENV_VAR, fault)
    assert main(["oracle-check"]) == 1
    out = capsys.readouterr().out
    assert f"FAIL {fault}" in out
    assert f"failed checks: {fault}" in out


def test_oracle_checks_structured():
    results = run_oracle_checks(instances=20, seed=5)
    assert [name for name, _, _ in results] == ["subsampling_identity", "nn_index"]
    assert all(passed for _, passed, _ in results)
