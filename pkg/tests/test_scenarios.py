import csv
import dataclasses
import json

import numpy as np
import pytest

from rangesim.cli import main
from rangesim.scenarios import (
    AGGREGATE_COLUMNS,
    MIN_DISC_DISTANCE,
    SESSION_COLUMNS,
    ScenarioConfig,
    ScenarioValidationError,
    emit_report,
    place_reflectors,
    run_scenario,
    sweep,
    sweep_seed,
    worker_count,
)

FAST = ScenarioConfig(replicas=3, session_duration_target=1e-4)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_defaults_are_valid():
    cfg = ScenarioConfig().validate()
    assert cfg.effective_bandwidth == 100e6
    # 1 ms over 10 responses of 512 samples at 10 ns
    assert cfg.effective_window == 9488


def test_window_from_session_target():
    cfg = ScenarioConfig(session_duration_target=1e-4)
    assert cfg.effective_window == 488
    assert ScenarioConfig(window=77, session_duration_target=1e-4).effective_window == 77


def test_validation_lists_every_violation():
    with pytest.raises(ScenarioValidationError) as e:
        ScenarioConfig(layout="GRID", distance=-1, bandwidth=30e6, replicas=0).validate()
    v = e.value.violations
    assert any("layout" in x for x in v)
    assert any("distance" in x for x in v)
    assert any("integer" in x for x in v)
    assert any("replicas" in x for x in v)
    assert len(v) == 4


def test_bandwidth_above_rate_rejected():
    with pytest.raises(ScenarioValidationError, match="exceed"):
        ScenarioConfig(bandwidth=200e6).validate()


def test_session_target_budget():
    with pytest.raises(ScenarioValidationError, match="too short"):
        ScenarioConfig(session_duration_target=1e-5).validate()
    with pytest.raises(ScenarioValidationError, match="exceeds"):
        ScenarioConfig(window=10_000, session_duration_target=1e-4).validate()


def test_unknown_and_mistyped_fields_rejected():
    with pytest.raises(ScenarioValidationError, match="unknown field"):
        ScenarioConfig.from_dict({"layout": "PAIR", "colour": "blue"})
    with pytest.raises(ScenarioValidationError, match="wrong type"):
        ScenarioConfig.from_dict({"n_reflectors": 2.5})
    with pytest.raises(ScenarioValidationError, match="wrong type"):
        ScenarioConfig.from_dict({"sic": 1})


def test_adversary_spec_validation():
    with pytest.raises(ScenarioValidationError, match="adversary.type"):
        ScenarioConfig(adversary={"type": "ghost"}).validate()
    with pytest.raises(ScenarioValidationError, match="unknown adversary field"):
        ScenarioConfig(adversary={"type": "sniffer", "position": [1, 2], "mood": "grumpy"}).validate()
    ScenarioConfig(adversary={"type": "jammer", "position": [0, 8], "power": 0.5}).validate()


def test_config_round_trip(tmp_path):
    cfg = ScenarioConfig(layout="EQUIDISTANT", n_reflectors=5, bandwidth=50e6, seed=9)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert ScenarioConfig.from_json(p) == cfg
    assert ScenarioConfig.from_json(p).digest() == cfg.digest()


def test_layouts(rng):
    eq = place_reflectors(ScenarioConfig(layout="EQUIDISTANT", n_reflectors=50, distance=7.0), rng)
    assert np.allclose([np.hypot(p.x, p.y) for p in eq], 7.0)
    disc = place_reflectors(ScenarioConfig(layout="RANDOM_DISC", n_reflectors=4000, distance=30.0), rng)
    r = np.array([np.hypot(p.x, p.y) for p in disc])
    assert r.min() >= MIN_DISC_DISTANCE and r.max() <= 30.0
    # uniform over area: half the points inside the radius that splits the annulus in two
    split = np.sqrt((1 + 30.0 ** 2) / 2)
    assert np.mean(r < split) == pytest.approx(0.5, abs=0.03)


def test_pair_scenario_accuracy():
    report = run_scenario(ScenarioConfig(replicas=10), workers=1)
    assert report.failure_rate == 0.0
    assert report.mae < 0.25


def test_determinism_and_worker_independence():
    a = run_scenario(FAST, workers=1)
    b = run_scenario(FAST, workers=2)
    assert a.error_table() == b.error_table()
    c = run_scenario(FAST, seed=1, workers=1)
    assert c.error_table() != a.error_table()


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("RANGESIM_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("RANGESIM_THREADS", "lots")
    with pytest.raises(ValueError):
        worker_count()


def test_emit_report_schema_and_bytes(tmp_path):
    report = run_scenario(FAST, workers=1)
    f1 = emit_report(report, tmp_path / "a")
    f2 = emit_report(run_scenario(FAST, workers=1), tmp_path / "b")
    for k in ("sessions", "aggregate", "config"):
        assert f1[k].read_bytes() == f2[k].read_bytes()
    rows = read_csv(f1["sessions"])
    assert tuple(rows[0]) == SESSION_COLUMNS == (
        "scenario_id", "replica", "reflector_id", "true_distance_m", "est_distance_m", "error_m", "failed",
        "n_responses_received")
    agg = read_csv(f1["aggregate"])
    assert tuple(agg[0]) == AGGREGATE_COLUMNS == ("axis_value", "mae_m", "failure_rate", "ci95_m")
    # aggregate MAE is recomputable from the per-session rows
    errs = [abs(float(r[5])) for r in rows[1:] if r[6] == "false"]
    assert float(agg[1][1]) == pytest.approx(np.mean(errs), rel=1e-12)
    side = json.loads(f1["config"].read_text())
    assert side["seed"] == 0
    assert ScenarioConfig.from_dict(side["config"]) == FAST


def test_all_failed_report(tmp_path):
    cfg = dataclasses.replace(FAST, alpha=1e12)
    report = run_scenario(cfg, workers=1)
    assert report.failure_rate == 1.0 and report.mae is None
    agg = read_csv(emit_report(report, tmp_path)["aggregate"])
    assert agg[1][1] == "" and float(agg[1][2]) == 1.0


def test_sweep_seeds_and_unknown_axis():
    with pytest.raises(ScenarioValidationError, match="sweep axis"):
        sweep(FAST, "wavelength", [1, 2])
    with pytest.raises(ScenarioValidationError):
        sweep(FAST, "bandwidth", [30e6])
    reports = sweep(dataclasses.replace(FAST, replicas=1), "distance", [4.0, 6.0], workers=1)
    assert [r.seed for r in reports] == [sweep_seed(0, 0), sweep_seed(0, 1)]
    assert reports[1].replicas[0].outcomes[0].true_distance == 6.0


def test_scenario_with_adversaries():
    base = dataclasses.replace(FAST, replicas=2)
    j = run_scenario(dataclasses.replace(base, adversary={"type": "jammer", "position": [0, 10], "power": 1.0}),
                     workers=1)
    assert j.failure_rate == 0.0
    r = run_scenario(dataclasses.replace(base, adversary={"type": "replay", "position": [0, 10],
                                                           "record_length": 100}), workers=1)
    assert all(not rep.attack["x_detected"] and not rep.attack["enlarged_accepted"] for rep in r.replicas)
    s = run_scenario(dataclasses.replace(base, adversary={"type": "sniffer", "position": [0, 0]}), workers=1)
    assert all(len(rep.sniffer_errors) == 1 for rep in s.replicas)


def write_cfg(tmp_path, data):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(data))
    return str(p)


def test_cli_run_and_validate(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"replicas": 2, "session_duration_target": 1e-4})
    assert main(["validate", "--config", cfg]) == 0
    assert main(["run", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "config.json").read_text())["seed"] == 5
    assert "mae" in capsys.readouterr().out


def test_cli_sweep(tmp_path):
    cfg = write_cfg(tmp_path, {"replicas": 1, "session_duration_target": 1e-4})
    assert main(["sweep", "--config", cfg, "--axis", "sic", "--values", "true,false", "--out", str(tmp_path / "s")]) == 0
    agg = read_csv(tmp_path / "s" / "aggregate.csv")
    assert [r[0] for r in agg[1:]] == ["true", "false"]


def test_cli_exit_codes(tmp_path):
    bad = write_cfg(tmp_path, {"nonsense": 1})
    assert main(["validate", "--config", bad]) == 2
    good = write_cfg(tmp_path, {"replicas": 1})
    assert main(["sweep", "--config", good, "--axis", "n_reflectors", "--values", "x", "--out", str(tmp_path)]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["validate", "--config", str(tmp_path / "broken.json")]) == 2
