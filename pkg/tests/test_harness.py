import copy
import math

import numpy as np
import pytest

from racsim import harness as H
from racsim.sfcore import Trace
from racsim.tuner import tracking_cost


def linear_cfg(**over):
    return H.deep_merge(H.builtin_scenario("linear_benchmark"), over)


# ------------------------------------------------------------------ references


def test_quintic_endpoints_and_midpoint():
    ref = H.quintic_reference(0.0, 1.0, 2.0)
    q, v, a = ref(0.0)
    assert (q[0], v[0], a[0]) == (0.0, 0.0, 0.0)
    q, v, a = ref(2.0)
    assert q[0] == 1.0 and v[0] == 0.0 and a[0] == pytest.approx(0.0, abs=1e-12)
    assert ref(1.0)[0][0] == 0.5
    # held outside the window
    assert ref(5.0)[0][0] == 1.0


def test_quintic_derivatives_consistent():
    ref = H.quintic_reference(0.2, -0.3, 1.5, t0=0.5)
    for t in (0.6, 1.0, 1.7):
        d = 1e-6
        vel_fd = (ref(t + d)[0] - ref(t - d)[0]) / (2 * d)
        acc_fd = (ref(t + d)[1] - ref(t - d)[1]) / (2 * d)
        np.testing.assert_allclose(ref(t)[1], vel_fd, rtol=1e-6)
        np.testing.assert_allclose(ref(t)[2], acc_fd, rtol=1e-5)


def test_quintic_schedule_passes_waypoints():
    sched = H.QuinticSchedule([0.0, 1.0, -1.0], [1.0, 2.0], start_s=0.5)
    assert sched(0.0)[0][0] == 0.0
    assert sched(1.5)[0][0] == 1.0
    assert sched(3.5)[0][0] == -1.0
    assert sched.end == 3.5
    with pytest.raises(ValueError):
        H.QuinticSchedule([0.0, 1.0], [1.0, 2.0])


def test_piecewise_linear():
    pl = H.PiecewiseLinear((0.0, 1.0), (0.0, 10.0))
    assert pl(0.25) == 2.5 and pl(3.0) == 10.0
    with pytest.raises(ValueError):
        H.PiecewiseLinear((1.0, 0.0), (0.0, 1.0))


# --------------------------------------------------------------------- config


def test_deep_merge_does_not_mutate():
    base = {"a": {"b": 1, "c": 2}, "d": [1]}
    out = H.deep_merge(base, {"a": {"b": 5}})
    assert out == {"a": {"b": 5, "c": 2}, "d": [1]}
    assert base["a"]["b"] == 1


@pytest.mark.parametrize(
    "mutate, path",
    [
        (lambda c: c.pop("duration_s"), "duration_s"),
        (lambda c: c["plant"].update(type="rocket"), "plant.type"),
        (lambda c: c["controller"]["gains"].update(k=[-1.0, 2.0]), "controller.gains"),
        (lambda c: c["controller"].update(variant="pid"), "controller.variant"),
        (lambda c: c.update(safety={"o_shoot": 1.0}), "safety.o_bound"),
        (lambda c: c.update(safety={"o_shoot": 0.1, "o_bound": 0.5}), "safety"),
        (lambda c: c["reference"].update(type="sine"), "reference.type"),
        (lambda c: c.update(duration_s=-1.0), "duration_s"),
    ],
)
def test_scenario_errors_carry_field_path(mutate, path):
    cfg = linear_cfg()
    mutate(cfg)
    with pytest.raises(H.ScenarioError) as info:
        H.run_scenario(cfg)
    assert str(info.value).startswith(path)


def test_load_scenario_rejects_non_mapping(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(H.ScenarioError):
        H.load_scenario(p)


def test_reference_width_checked():
    cfg = linear_cfg(reference={"type": "constant", "value": [0.0, 0.0]})
    with pytest.raises(H.ScenarioError, match="reference"):
        H.run_scenario(cfg)


# -------------------------------------------------------------------- metrics


def test_zero_reference_zero_state_run():
    cfg = linear_cfg(plant={"initial_state": [0.0, 0.0]}, duration_s=1.0,
                     safety={"o_shoot": 1.0, "o_bound": 0.5, "o_star_per_s": 1.0})
    trace, met = H.run_scenario(cfg)
    assert met.position_rmse == 0.0 and met.velocity_rmse == 0.0
    assert met.switch_time_s is None and met.shutdown_time_s is None
    assert met.envelope_violations == 0
    assert set(trace.policy) == {"rac"}


def test_settling_time():
    t = np.arange(6) * 0.1
    assert H.settling_time(t, [1.0, 0.5, 0.01, 0.2, 0.0, 0.0], 0.1) == pytest.approx(0.4)
    assert H.settling_time(t, np.zeros(6), 0.1) == 0.0
    assert H.settling_time(t, [0.0, 0.0, 0.0, 0.0, 0.0, 1.0], 0.1) is None


def test_not_settled_label():
    m = H.Metrics(1.0, 0.0, None, 0.0, 0, None)
    row = m.row()
    assert row["settling_time_s"] == "not settled"
    assert row["switch_time_s"] == "" and row["shutdown_time_s"] == ""


def test_metrics_pure_function_of_csv(tmp_path):
    trace, met = H.run_scenario(linear_cfg(duration_s=1.0))
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    back = Trace.from_csv(path, trace.n, trace.m)
    assert H.compute_metrics(back) == met


def test_metrics_from_reference_columns():
    cfg = linear_cfg(reference={"type": "quintic", "q0": 0.0, "qf": 1.0, "duration_s": 1.0},
                     plant={"initial_state": [0.0, 0.0]}, duration_s=2.0,
                     controller={"gains": {"k": [10.0, 10.0]}})
    trace, met = H.run_scenario(cfg)
    assert "ref" in trace.extras
    assert met.peak_control == float(np.max(np.abs(trace.u_sat)))
    assert isinstance(met.settling_time_s, float)


def test_linear_benchmark_decays():
    trace, met = H.run_scenario(linear_cfg())
    e = np.abs(trace.error(1))
    assert e[-1] < 1e-3 * e[0]
    assert met.settling_time_s is not None


# --------------------------------------------------------------------- tuning


def test_parse_tunable():
    assert H.parse_tunable("k", 3, 1) == ("k", slice(None), slice(None))
    assert H.parse_tunable("k2", 3, 1) == ("k", 1, slice(None))
    assert H.parse_tunable("gamma3_1", 3, 1) == ("gamma", 2, 0)
    assert H.parse_tunable("eps1", 3, 1) == ("eps", 0, slice(None))
    with pytest.raises(H.ScenarioError):
        H.parse_tunable("k4", 3, 1)
    with pytest.raises(H.ScenarioError):
        H.parse_tunable("zeta1", 3, 1)


def test_gain_block_roundtrip():
    cfg = linear_cfg()
    g = H.gains_with_params(cfg, ["k1", "k2"], [[4.0, 5.0]], 2, 1)
    block = H.gain_block({f: v[0] for f, v in g.items()})
    assert block["k"] == [4.0, 5.0]
    assert block["gamma"] == [1e-6, 1e-6]


@pytest.mark.parametrize("variant", ["model_based", "model_free"])
def test_rollout_costs_match_single_runs(variant):
    cfg = linear_cfg(duration_s=1.0, controller={"variant": variant})
    values = np.array([[2.0, 3.0], [5.0, 1.0], [1.0, 8.0]])
    costs = H.rollout_costs(cfg, H.gains_with_params(cfg, ["k1", "k2"], values, 2, 1), (1.0, 0.5))
    for row, c in zip(values, costs):
        single = H.deep_merge(cfg, {"controller": {"gains": {"k": row.tolist()}}})
        trace, _ = H.run_scenario(single)
        assert c == pytest.approx(tracking_cost(trace, (1.0, 0.5)), rel=1e-12)


def test_rollout_costs_shutdown_is_inf():
    cfg = linear_cfg(duration_s=1.0, safety={"o_shoot": 2.0, "o_bound": 0.01, "o_star_per_s": 5.0})
    costs = H.rollout_costs(cfg, H.gains_with_params(cfg, ["k"], [[0.1], [30.0]], 2, 1))
    assert costs[0] == math.inf and math.isfinite(costs[1])


def test_tune_scenario_small():
    cfg = linear_cfg(duration_s=1.0,
                     tuning={"params": ["k1", "k2"], "lower": [0.5, 0.5], "upper": [20.0, 20.0]})
    calls = []
    best, hist, tuned = H.tune_scenario(cfg, pop_size=6, max_iters=5, seed=1,
                                        callback=lambda it, b: calls.append(it))
    assert len(hist) == 6 and np.all(np.diff(hist) <= 0)
    assert tuned["controller"]["gains"]["k"] == pytest.approx(best.gains.tolist())
    assert cfg["controller"]["gains"]["k"] == [2.0, 3.0]
    assert calls
    _, met = H.run_scenario(tuned)
    assert met.position_rmse == pytest.approx(best.cost, rel=1e-9)


# -------------------------------------------------------------------- compare


def test_compare_identical_controllers_identical_rows():
    cfg = linear_cfg(duration_s=1.0)
    rows = H.compare([cfg], [{"label": "a"}, {"label": "b"}])
    a, b = ({k: v for k, v in r.items() if k != "controller"} for r in rows)
    assert a == b and a["error"] == ""


def test_compare_reports_shutdown_time():
    cfg = linear_cfg(duration_s=1.0, safety={"o_shoot": 2.0, "o_bound": 0.01, "o_star_per_s": 20.0})
    rows = H.compare([cfg], [{"label": "slow", "controller": {"gains": {"k": [0.1, 0.1]}}}])
    row = rows[0]
    assert row["error"] == ""
    assert isinstance(row["shutdown_time_s"], float) and row["shutdown_time_s"] > 0
    assert row["envelope_violations"] == 1


def test_compare_error_column():
    cfg = linear_cfg(duration_s=0.5)
    rows = H.compare([cfg], [{"label": "bad", "controller": {"gains": {"k": [-1.0, 1.0]}}}, {"label": "ok"}])
    assert rows[0]["error"].startswith("ScenarioError")
    assert rows[0]["position_rmse"] == ""
    assert rows[1]["error"] == ""


def test_rows_to_csv(tmp_path):
    rows = [{"a": 0.1, "b": "x"}, {"a": 1e-17, "b": ""}]
    text = H.rows_to_csv(rows, tmp_path / "r.csv")
    assert text == "a,b\n0.1,x\n1e-17,\n"
    assert (tmp_path / "r.csv").read_text() == text


@pytest.mark.slow
def test_compare_model_based_beats_model_free():
    from pathlib import Path

    import yaml

    d = Path(H.__file__).parent / "scenarios"
    manifest = yaml.safe_load((d / "compare_emla.yaml").read_text())
    scenarios = [H.load_scenario(d / s) for s in manifest["scenarios"]]
    rows = H.compare(scenarios, copy.deepcopy(manifest["controllers"]))
    mb, mf = rows
    assert mb["error"] == "" and mf["error"] == ""
    assert mb["position_rmse"] < mf["position_rmse"]
