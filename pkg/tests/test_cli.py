import copy
import csv
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hkfncs.cli import main
from hkfncs.config import load_scenario, scenario_from_config
from hkfncs.experiments import collect_errors, fault_injection, hgmm_sweep, monte_carlo, verify
from hkfncs.model import ConfigurationError
from hkfncs.ncs import run_closed_loop
from hkfncs.records import TRACE_SCHEMA, TraceRecord, header, read_trace_csv, trace_csv, trace_records

ROOT = Path(__file__).resolve().parents[1]
SCALAR = ROOT / "configs" / "scalar.json"
TWO_STATE = ROOT / "configs" / "two_state.json"

MINIMAL = {
    "horizon": 8,
    "seed": 1,
    "plant": {"A": [[0.9]], "B": [[1.0]], "Xi": [[0.1]], "x0_mean": [0.0], "P0": [[1.0]]},
    "sensors": [{"H": [[1.0]], "Theta": [[0.5]]}],
}


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


# config


def test_minimal_config_defaults():
    sc = scenario_from_config(MINIMAL)
    assert sc.horizon == 8 and sc.N_A == 0 and sc.estimator == "hkf" and sc.init == "measurement"
    assert np.allclose(sc.hgmm.info_matrix, [[2.0]])
    assert sc.ca_channel.ack_mode == "tcp_like" and sc.se_channels[0].ack_mode == "none"


@pytest.mark.parametrize(
    "path, value, field",
    [
        (("plant", "B"), [[1.0, 2.0], [3.0, 4.0]], "plant.B"),
        (("sensors", 0, "H"), [[1.0, 2.0]], "sensors[0].H"),
        (("sensors", 0, "Theta"), [[0.0]], "sensors[0].Theta"),
        (("hgmm",), [[1.0, 0.0], [0.0, 1.0]], "hgmm"),
        (("network",), {"se": {"delay_pmf": [0.5, 0.2]}}, "network.se[0].delay_pmf"),
        (("network",), {"ca": {"ack_mode": "none"}}, "network.ca.ack_mode"),
        (("controller",), {"R": [[0.0]]}, "controller.R"),
        (("controller",), {"N_A": -1}, "controller.N_A"),
        (("estimator",), {"init": "guess"}, "estimator.init"),
        (("horizon",), 0, "horizon"),
    ],
)
def test_config_errors_name_field(path, value, field):
    cfg = copy.deepcopy(MINIMAL)
    target = cfg
    for key in path[:-1]:
        target = target[key]
    target[path[-1]] = value
    with pytest.raises(ConfigurationError) as err:
        scenario_from_config(cfg)
    assert err.value.field == field


def test_missing_key_is_named():
    cfg = copy.deepcopy(MINIMAL)
    del cfg["plant"]["Xi"]
    with pytest.raises(ConfigurationError) as err:
        scenario_from_config(cfg)
    assert err.value.field == "plant.Xi"


def test_per_sensor_channel_overrides():
    sc = load_scenario(TWO_STATE)
    assert [c.loss_prob for c in sc.se_channels] == [0.2, 0.2, 0.5]


# records


def test_trace_round_trip_and_schema():
    res = run_closed_loop(load_scenario(TWO_STATE), [0])
    recs = trace_records(res)
    text = trace_csv(recs)
    assert text.splitlines()[0].split(",") == header(2, 1, 3)
    assert all(line.startswith(TRACE_SCHEMA) for line in text.splitlines()[1:])
    assert read_trace_csv(text) == recs


@settings(max_examples=30, deadline=None)
@given(
    x=st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=2, max_size=2),
    est=st.one_of(st.none(), st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=2, max_size=2)),
    dev=st.one_of(st.none(), st.floats(0, 1e6)),
)
def test_trace_round_trip_property(x, est, dev):
    rec = TraceRecord(3, tuple(x), (0.5,), None if est is None else tuple(est), (True, False), (3, -1), dev, 1.25)
    assert read_trace_csv(trace_csv([rec])) == [rec]


def test_unavailable_estimate_is_blank():
    cfg = copy.deepcopy(MINIMAL)
    res = run_closed_loop(scenario_from_config(cfg), [0])
    rows = list(csv.DictReader(trace_csv(trace_records(res)).splitlines()))
    assert rows[0]["estimate_available"] == "0" and rows[0]["est_0"] == "" and rows[0]["delta_dev"] == ""
    assert rows[1]["estimate_available"] == "1"


# CLI


def test_cli_run_minimal(tmp_path):
    cfg = write(tmp_path, MINIMAL)
    out = tmp_path / "t.csv"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 8
    assert lines[0].split(",") == header(1, 1, 1)


def test_cli_run_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["run", "--config", str(SCALAR), "--out", str(a), "--seed", "3"]) == 0
    assert main(["run", "--config", str(SCALAR), "--out", str(b), "--seed", "3"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert main(["run", "--config", str(SCALAR), "--out", str(b), "--seed", "4"]) == 0
    assert a.read_bytes() != b.read_bytes()


def test_cli_malformed_config_exit_2(tmp_path, capsys):
    cfg = copy.deepcopy(MINIMAL)
    cfg["sensors"][0]["H"] = [[1.0, 0.0]]
    assert main(["run", "--config", str(write(tmp_path, cfg))]) == 2
    assert "sensors[0].H" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["verify", "--config", str(bad)]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2


def test_cli_out_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("HKFNCS_OUT_DIR", str(tmp_path / "results"))
    assert main(["run", "--config", str(SCALAR)]) == 0
    assert (tmp_path / "results" / "trace.csv").exists()


def test_cli_monte_carlo_json(tmp_path):
    out = tmp_path / "s.json"
    assert main(["monte-carlo", "--config", str(SCALAR), "--runs", "50", "--out", str(out)]) == 0
    s = json.loads(out.read_text())
    assert s["schema"] == "hkfncs.summary.v1" and s["runs"] == 50
    assert len(s["per_step"]["mean_error"]) == 30
    assert s["per_step"]["mean_error"][0] == [None]  # no estimate at step 0
    assert set(s["mse"]) == {"mean", "stderr", "ci95"}


def test_cli_sweep_csv(tmp_path):
    out = tmp_path / "w.csv"
    assert main(["hgmm-sweep", "--config", str(SCALAR), "--runs", "40", "--alphas", "0.5,1", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.read_text().splitlines()))
    assert [float(r["alpha"]) for r in rows] == [0.5, 1.0]
    assert all(float(r["ci_low"]) <= float(r["mse"]) <= float(r["ci_high"]) for r in rows)


def test_cli_verify_default_and_fault(capsys):
    assert main(["verify", "--config", str(SCALAR)]) == 0
    assert "all identities hold" in capsys.readouterr().out
    assert main(["verify", "--config", str(SCALAR), "--inject-fault", "delta"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "local_delta_sum" in out.splitlines()[-1]


def test_cli_verify_horizon_one(tmp_path):
    cfg = json.loads(SCALAR.read_text())
    cfg["horizon"] = 1
    assert main(["verify", "--config", str(write(tmp_path, cfg))]) == 0
    results = {r.name: r for r in verify(scenario_from_config(cfg))}
    assert results["local_x_sum"].checked > 0 and results["gain_identity"].checked == 1
    assert results["inner_term"].checked == 0


def test_verify_matched_lossless_includes_central_equivalence():
    cfg = json.loads(TWO_STATE.read_text())
    cfg["network"] = {"ca": {"loss_prob": 0.4}}
    results = {r.name: r for r in verify(scenario_from_config(cfg), horizon_cap=15)}
    assert results["central_equivalence"].checked > 0
    assert all(r.passed for r in results.values())


def test_fault_injection_restores_filter():
    sc = load_scenario(SCALAR)
    with fault_injection("delta"):
        bad = {r.name: r for r in verify(sc, horizon_cap=10)}
    assert not bad["local_delta_sum"].passed
    assert all(r.passed for r in verify(sc, horizon_cap=10))


# experiments


def test_monte_carlo_single_run_equals_trace():
    sc = load_scenario(SCALAR)
    s = monte_carlo(sc, 1)
    res = run_closed_loop(sc, [0])
    err = res.estimate[0] - res.x_true[0, :30]
    for k in range(1, 30):
        assert s["per_step"]["mean_error"][k][0] == err[k, 0]
    ok = res.available[0]
    assert s["mse"]["mean"] == pytest.approx(np.mean(np.sum(err[ok] ** 2, axis=-1)), rel=1e-15)
    assert s["cost"]["mean"] == res.total_cost[0]
    assert np.isnan(s["mse"]["stderr"])


def test_monte_carlo_zero_noise_zero_mse():
    cfg = json.loads(SCALAR.read_text())
    cfg["simulate_noise"] = False
    cfg["plant"]["x0_mean"] = [1.5]
    s = monte_carlo(scenario_from_config(cfg), 30)
    assert s["mse"]["mean"] <= 1e-20


def test_monte_carlo_mismatched_mean_error_ci_contains_zero():
    s = monte_carlo(load_scenario(TWO_STATE), 3000)
    mean, se = np.array(s["pooled"]["mean_error"]), np.array(s["pooled"]["stderr"])
    assert np.all(np.abs(mean) <= 1.96 * se * 1.5)  # 95% interval, all components jointly at the 1.5x margin


def test_chunking_and_parallelism_do_not_change_results():
    sc = load_scenario(SCALAR)
    a = collect_errors(sc, 90, chunk=90)
    b = collect_errors(sc, 90, chunk=25)
    c = collect_errors(sc, 90, chunk=30, parallel=2)
    for other in (b, c):
        assert np.array_equal(a.error, other.error, equal_nan=True)
        assert np.array_equal(a.cost, other.cost)


def test_sweep_single_alpha_equals_matched_run():
    sc = load_scenario(TWO_STATE)  # matched HGMM
    rows = hgmm_sweep(sc, [1.0], 200)
    s = monte_carlo(sc, 200)
    assert len(rows) == 1 and rows[0]["mse"] == s["mse"]["mean"]


def test_sweep_degrades_away_from_matched():
    rows = {r["alpha"]: r for r in hgmm_sweep(load_scenario(SCALAR), [0.25, 0.5, 2.0, 4.0], 1500)}
    assert rows[0.25]["ci_low"] > rows[0.5]["mse"] or rows[0.25]["mse"] > rows[0.5]["ci_high"]
    assert rows[4.0]["ci_low"] > rows[2.0]["mse"] or rows[4.0]["mse"] > rows[2.0]["ci_high"]
