import csv
import json
import pickle

import pytest
from pydantic import ValidationError

from conftest import make_scenario
from experiment import (
    ExperimentOverrides,
    ReplicaFailed,
    apply_overrides,
    compare,
    ecdf,
    load_report,
    mean_ci,
    run_experiment,
    run_replicas,
    summarize,
)
from models import ControlCategory, PathMetric, StackMode, Window
from sim.metrics import RttSample, Metrics


def _pair(replicas=2):
    return make_scenario(
        [(1, 0, 0, "border_router"), (2, 40, 0, "sender")],
        run={"duration_s": 600, "warmup_s": 300, "replicas": replicas, "base_seed": 4},
    )


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


# --- Estadística ---
def test_mean_ci_uses_student_t():
    mean, low, high = mean_ci([1.0, 2.0, 3.0])
    assert mean == 2.0
    half = 4.302652729911275 / 3 ** 0.5
    assert low == pytest.approx(2.0 - half)
    assert high == pytest.approx(2.0 + half)


def test_mean_ci_single_value_has_no_width():
    assert mean_ci([7.5]) == (7.5, 7.5, 7.5)


def test_ecdf():
    assert ecdf([3, 1, 2]) == [(1.0, pytest.approx(1 / 3)), (2.0, pytest.approx(2 / 3)), (3.0, 1.0)]
    assert ecdf([]) == []


# --- Resumen ---
def _metrics():
    a = Metrics(0, 1, StackMode.SDN, warmup_us=100)
    a.record_rtt(RttSample(50, 9_000, 2, 1))
    a.record_rtt(RttSample(200, 10_000, 2, 1))
    a.record_rtt(RttSample(300, 20_000, 2, 1))
    a.control[(Window.STEADY, ControlCategory.DIO)] = 2
    a.control_bytes[(Window.STEADY, ControlCategory.DIO)] = 100
    a.control_bytes[(Window.STEADY, ControlCategory.DATA)] = 999
    a.control_bytes[(Window.WARMUP, ControlCategory.DIO)] = 500

    b = Metrics(1, 2, StackMode.SDN, warmup_us=100)
    b.record_rtt(RttSample(200, 30_000, 2, 1))
    b.control[(Window.STEADY, ControlCategory.DAO)] = 4
    b.control_bytes[(Window.STEADY, ControlCategory.DAO)] = 300
    b.dao_datagrams = 5
    b.table_miss_requests[Window.STEADY] = 1
    b.last_miss_us = 2_000_000
    return [a, b]


def test_summarize_aggregates_steady_window():
    report = summarize("prueba", StackMode.SDN, _metrics())
    s = report.summary
    assert report.label == "prueba_sdn"
    assert s.replicas == 2
    assert s.control_bytes_mean == 200
    assert s.control_bytes_std == pytest.approx(2 ** 0.5 * 100)
    assert s.control_count_mean == 3
    assert s.rtt_samples == 3
    assert s.rtt_mean_ms == pytest.approx(22.5)
    expected = mean_ci([15.0, 30.0])
    assert (s.rtt_ci_low_ms, s.rtt_ci_high_ms) == (pytest.approx(expected[1]), pytest.approx(expected[2]))
    assert s.convergence_mean_s == 2.0
    assert s.dao_total == 5
    assert s.table_miss_steady_total == 1
    assert [r.rtt_mean_ms for r in report.replicas] == [pytest.approx(15.0), pytest.approx(30.0)]
    assert report.ecdf[-1] == (30.0, 1.0)


def test_summarize_without_samples():
    report = summarize("vacío", StackMode.RPL, [Metrics(0, 1, StackMode.RPL, 0)])
    assert report.summary.rtt_mean_ms is None
    assert report.summary.control_bytes_std == 0
    assert report.ecdf == []


# --- Overrides ---
def test_testbed_profile():
    s = apply_overrides(_pair(), ExperimentOverrides(profile="testbed"))
    assert s.sdn.flow_table_capacity == 20
    assert s.sdn.update_period_s == 600
    assert s.sdn.path_metric is PathMetric.ETX
    assert s.rpl.routing_capacity == 20


def test_explicit_flags_win_over_profile():
    ov = ExperimentOverrides(profile="testbed", update_period_s=300, metric="hop", routing_capacity=5)
    s = apply_overrides(_pair(), ov)
    assert s.sdn.update_period_s == 300
    assert s.sdn.path_metric is PathMetric.HOP
    assert s.rpl.routing_capacity == 5


def test_lossy_channel():
    s = apply_overrides(_pair(), ExperimentOverrides(lossy=True))
    assert (s.channel.p_tx_success, s.channel.p_rx_success) == (0.9, 0.9)


def test_short_duration_shrinks_warmup():
    base = _pair()
    assert apply_overrides(base, ExperimentOverrides(duration_s=100)).run.warmup_s == 25
    assert apply_overrides(base, ExperimentOverrides(duration_s=100, warmup_s=10)).run.warmup_s == 10
    assert apply_overrides(base, ExperimentOverrides(duration_s=2000)).run.warmup_s == 300


def test_overrides_do_not_touch_the_original():
    base = _pair()
    s = apply_overrides(base, ExperimentOverrides(replicas=7, seed=40))
    assert (s.run.replicas, s.run.base_seed) == (7, 40)
    assert (base.run.replicas, base.run.base_seed) == (2, 4)


def test_invalid_overrides_are_rejected():
    with pytest.raises(ValidationError):
        ExperimentOverrides(replicas=0)
    with pytest.raises(ValidationError):
        apply_overrides(_pair(), ExperimentOverrides(warmup_s=5000))


def test_replica_failure_survives_pickling():
    err = pickle.loads(pickle.dumps(ReplicaFailed(3, "ValueError: x")))
    assert (err.index, err.cause) == (3, "ValueError: x")
    assert "3" in str(err)


# --- Corridas y archivos ---
def test_run_experiment_writes_outputs(tmp_path):
    report = run_experiment(_pair(), StackMode.SDN, out_dir=tmp_path, dump_graph=True)
    assert [r.seed for r in report.replicas] == [4, 5]

    for name in ("control.csv", "rtt.csv", "diagnostics.csv", "replicas.csv", "ecdf.csv", "summary.json"):
        assert (tmp_path / name).exists()
    control = _rows(tmp_path / "control.csv")
    assert control[0] == ["replica", "seed", "mode", "window", "category", "count", "bytes"]
    assert len(control) == 1 + 2 * len(Window) * len(ControlCategory)
    assert len(_rows(tmp_path / "replicas.csv")) == 3
    rtt = _rows(tmp_path / "rtt.csv")
    steady = [row for row in rtt[1:] if row[10] == "steady"]
    assert steady and all(row[8] == "2-1" for row in steady)

    graph = json.loads((tmp_path / "graph_0.json").read_text())
    assert {n["addr"] for n in graph["graph"]["nodes"]} == {1, 2}
    assert load_report(tmp_path) == report


def test_parallel_replicas_match_sequential():
    seq = run_replicas(_pair(), StackMode.SDN, jobs=1)
    par = run_replicas(_pair(), StackMode.SDN, jobs=2)
    assert [m.control_rows() for m in seq] == [m.control_rows() for m in par]
    assert [m.rtt_rows() for m in seq] == [m.rtt_rows() for m in par]


def test_compare_side_by_side(tmp_path):
    run_experiment(_pair(replicas=1), StackMode.SDN, out_dir=tmp_path / "sdn")
    run_experiment(_pair(replicas=1), StackMode.RPL, out_dir=tmp_path / "rpl")
    rows = compare(tmp_path / "sdn", tmp_path / "rpl" / "summary.json", tmp_path / "cmp")

    table = _rows(tmp_path / "cmp" / "comparison.csv")
    assert table[0] == ["metric", "prueba_sdn", "prueba_rpl"]
    assert len(table) == 1 + len(rows)
    dao = dict((r[0], r[1:]) for r in rows)["dao_total"]
    assert dao[0] == 0 and dao[1] > 0
    assert (tmp_path / "cmp" / "ecdf_prueba_sdn.csv").exists()
    assert (tmp_path / "cmp" / "ecdf_prueba_rpl.csv").exists()


def test_compare_same_label_gets_suffixes(tmp_path):
    run_experiment(_pair(replicas=1), StackMode.SDN, out_dir=tmp_path / "a")
    compare(tmp_path / "a", tmp_path / "a", tmp_path / "cmp")
    assert _rows(tmp_path / "cmp" / "comparison.csv")[0] == ["metric", "prueba_sdn_a", "prueba_sdn_b"]
