from __future__ import annotations

import json

import pytest

from leostream.abr import AbrParams, synthetic_ladder
from leostream.harness import (ExperimentError, CcScenario, SweepReport, SweepSpec, emit, normalize,
                               parse_csv, resolve_corpus, resolve_ladder, rows_to_csv, run_cc_ab, run_sweep,
                               sha256_file, trend, tune, write_manifest, SWEEP_COLUMNS)
from leostream.link_model import generate_corpus, save_trace
from leostream.qoe import qoe_report
from leostream.session import simulate_session

SMALL_A = "preset:starlink_like:4:60000"
SMALL_B = "preset:terrestrial_like:4:60000"
LADDER = "synthetic:15:1"


# -- normalization --------------------------------------------------------------

def test_subtract_min():
    assert normalize([5.0, 3.0, 4.0]) == [2.0, 0.0, 1.0]


def test_divide_min():
    assert normalize([2.0, 4.0, 3.0], "divide_min") == [1.0, 2.0, 1.5]


def test_normalize_errors():
    with pytest.raises(ExperimentError):
        normalize([0.0, 1.0], "divide_min")
    with pytest.raises(ExperimentError):
        normalize([])
    with pytest.raises(ExperimentError):
        normalize([1.0], "zscore")


def test_trend_slope_and_p():
    t = trend([0, 1, 2], [1.0, 3.0, 5.0], [0, 0, 1, 1, 2, 2], [1.0, 1.2, 3.0, 2.8, 5.1, 4.9])
    assert t["slope"] == pytest.approx(2.0)
    assert t["p_value"] < 0.01
    assert trend([1.0], [2.0])["slope"] is None


# -- inputs -----------------------------------------------------------------------

def test_missing_corpus_path_named(tmp_path):
    missing = tmp_path / "nowhere.csv"
    with pytest.raises(FileNotFoundError, match="nowhere.csv"):
        resolve_corpus(str(missing))
    with pytest.raises(FileNotFoundError, match="no trace files"):
        resolve_corpus(str(tmp_path))
    with pytest.raises(FileNotFoundError, match="ladder.csv"):
        resolve_ladder(str(tmp_path / "ladder.csv"))


def test_corpus_directory_loads_sorted(tmp_path):
    for t in generate_corpus("starlink_like", 3, 10_000, seed=2):
        save_trace(t, tmp_path / f"{t.trace_id}.csv")
    traces = resolve_corpus(str(tmp_path))
    assert [t.trace_id for t in traces] == sorted(t.trace_id for t in traces)
    assert len(traces) == 3


def test_preset_reference_shapes():
    traces = resolve_corpus("preset:terrestrial_like:3:20000", seed=5)
    assert len(traces) == 3 and all(t.duration_ms == 20_000 for t in traces)
    assert resolve_ladder("synthetic:12:4").n_chunks == 12


# -- sweeps -----------------------------------------------------------------------

def test_sweep_spec_validation():
    with pytest.raises(ExperimentError, match="outside"):
        SweepSpec("throughput_discount_frac", [0.7])
    with pytest.raises(ExperimentError, match="cannot sweep"):
        SweepSpec("max_buffer_ms", [1])
    with pytest.raises(ExperimentError):
        SweepSpec("smoothing_half_life_ms", [])


def test_single_trace_sweep_equals_direct_session():
    traces = generate_corpus("starlink_like", 1, 60_000, seed=8)
    ladder = synthetic_ladder(n_chunks=15, seed=1)
    spec = SweepSpec("throughput_discount_frac", [0.3], corpus_a=traces, corpus_b=traces, ladder_ref=ladder)
    report = run_sweep(spec)
    direct = qoe_report(simulate_session(traces[0], ladder, AbrParams(throughput_discount_frac=0.3)), ladder)
    row = report.rows[0]
    assert row["n_sessions"] == 1
    assert row["mean_rebuffers_per_hour"] == direct.rebuffers_per_hour
    assert row["mean_time_weighted_vmaf"] == direct.time_weighted_vmaf
    assert row["mean_switch_count"] == direct.switch_count


def test_identical_corpora_give_identical_aggregates():
    traces = generate_corpus("starlink_like", 3, 60_000, seed=1)
    spec = SweepSpec("smoothing_half_life_ms", [0, 50_000], corpus_a=traces, corpus_b=list(traces),
                     ladder_ref=LADDER)
    report = run_sweep(spec)
    names = sorted({r["corpus"] for r in report.rows})
    assert len(names) == 2
    strip = ("corpus",)
    a = [{k: v for k, v in r.items() if k not in strip} for r in report.rows if r["corpus"] == names[0]]
    b = [{k: v for k, v in r.items() if k not in strip} for r in report.rows if r["corpus"] == names[1]]
    assert a == b
    assert all(r["rebuffers_vs_other_p"] == 1.0 for r in report.rows)


def _small_sweep(workers=1):
    return run_sweep(SweepSpec("buffer_discount_threshold_ms", [0, 50_000, 100_000], corpus_a=SMALL_A,
                               corpus_b=SMALL_B, ladder_ref=LADDER, seed=3, workers=workers))


def test_sweep_report_shape_and_normalized_columns():
    report = _small_sweep()
    assert len(report.rows) == 6 and len(report.sessions) == 24
    for corpus in ("starlink_like", "terrestrial_like"):
        assert report.values(corpus) == [0.0, 50_000.0, 100_000.0]
        assert min(report.series(corpus, "vmaf_subtract_min")) == 0.0
    assert {t["metric"] for t in report.trends} == {"rebuffers_per_hour", "time_weighted_vmaf", "switch_count"}


def test_sweep_deterministic_and_worker_independent(tmp_path):
    a, b = _small_sweep(), _small_sweep(workers=2)
    assert a.rows == b.rows and a.sessions == b.sessions
    fa = emit(a, tmp_path / "a")
    fb = emit(b, tmp_path / "b")
    assert [sha256_file(p) for p in fa] == [sha256_file(p) for p in fb]


# -- emit ------------------------------------------------------------------------

def test_emit_round_trip(tmp_path):
    report = _small_sweep()
    files = emit(report, tmp_path)
    assert sorted(p.name for p in files) == ["sessions.csv", "sweep.csv", "trends.csv"]
    rows = parse_csv((tmp_path / "sweep.csv").read_text())
    assert len(rows) == len(report.rows)
    for got, want in zip(rows, report.rows):
        for col in SWEEP_COLUMNS:
            assert got[col] == want[col]


def test_emit_empty_report_writes_headers(tmp_path):
    emit(SweepReport("smoothing_half_life_ms"), tmp_path)
    assert (tmp_path / "sweep.csv").read_text() == ",".join(SWEEP_COLUMNS) + "\n"


def test_emit_plotdata(tmp_path):
    emit(_small_sweep(), tmp_path, "plotdata")
    rows = parse_csv((tmp_path / "plotdata.csv").read_text())
    assert set(rows[0]) == {"metric", "x", "y", "corpus"}
    assert {r["metric"] for r in rows} >= {"rebuffers_per_hour", "time_weighted_vmaf"}
    with pytest.raises(ExperimentError):
        emit(SweepReport("x"), tmp_path, "parquet")


def test_csv_cells():
    text = rows_to_csv([{"a": 0.1, "b": None, "c": True, "d": "x"}], ["a", "b", "c", "d"])
    assert text == "a,b,c,d\n0.1,,1,x\n"
    assert parse_csv(text) == [{"a": 0.1, "b": None, "c": 1, "d": "x"}]


def test_manifest_hashes_outputs(tmp_path):
    files = emit(_small_sweep(), tmp_path)
    m = json.loads(write_manifest(tmp_path, "sweep", {"seed": 3, "corpus": [1, 2]}, 3, files).read_text())
    assert m["outputs"]["sweep.csv"] == sha256_file(tmp_path / "sweep.csv")
    assert m["inputs"]["corpus"] == "<2 traces>"
    assert "time" not in json.dumps(m)


# -- congestion A/B ---------------------------------------------------------------

def test_ab_requires_two_runs_and_matching_paths():
    with pytest.raises(ExperimentError, match="n_runs"):
        run_cc_ab(CcScenario(), CcScenario(variant="multcp(3)"), 1)
    with pytest.raises(ExperimentError, match="differ only"):
        run_cc_ab(CcScenario(), CcScenario(variant="multcp(3)", base_rtt_ms=10), 5)


def test_aa_ratio_near_one():
    sc = CcScenario(bottleneck="20", base_rtt_ms=40, random_loss_rate=0.002, bytes_to_send=2_000_000)
    report = run_cc_ab(sc, sc, 12, seed=4)
    g = report.metric("goodput_mbps")
    assert g["ratio"] == pytest.approx(1.0, abs=0.15)
    assert g["mw_p"] > 0.05
    assert len(report.runs) == 24


def test_ab_emit(tmp_path):
    sc = CcScenario(bottleneck="20", base_rtt_ms=40, random_loss_rate=0.002, bytes_to_send=1_000_000)
    report = run_cc_ab(sc, CcScenario(variant="multcp(3)", bottleneck="20", base_rtt_ms=40,
                                      random_loss_rate=0.002, bytes_to_send=1_000_000), 3)
    names = sorted(p.name for p in emit(report, tmp_path) + emit(report, tmp_path, "plotdata")
                   + emit(report, tmp_path, "timeline"))
    assert names == ["ab_runs.csv", "ab_summary.csv", "cwnd_timeline.csv", "plotdata.csv"]
    timeline = parse_csv((tmp_path / "cwnd_timeline.csv").read_text())
    assert [r["t_ms"] for r in timeline if r["arm"] == "control" and r["run"] == 0][0] == 0.0
    summary = parse_csv((tmp_path / "ab_summary.csv").read_text())
    assert [r["metric"] for r in summary] == ["goodput_mbps", "retransmit_rate", "rtt_p95_ms", "cwnd_max_bytes"]


def test_preset_path_varies_with_seed():
    sc = CcScenario()
    assert sc.path_for(1) == sc.path_for(1)
    assert sc.path_for(1).seed != sc.path_for(2).seed


# -- tuning ----------------------------------------------------------------------

def test_tune_ranks_best_first():
    trials = tune("preset:starlink_like:2:60000", LADDER, n_trials=6, seed=2)
    assert len(trials) == 6
    sums = [t["rank_sum"] for t in trials]
    assert sums == sorted(sums)
    assert trials == tune("preset:starlink_like:2:60000", LADDER, n_trials=6, seed=2)


def test_constant_series_normalizes_to_zero_and_one():
    assert normalize([2.5] * 3) == [0.0] * 3
    assert normalize([2.5] * 3, "divide_min") == [1.0] * 3
