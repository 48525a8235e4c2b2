from __future__ import annotations

import numpy as np
import pytest

from leostream import link_model as lm
from leostream.link_model import (SyntheticLinkConfig, ThroughputSample, ThroughputTrace, TraceFormatError,
                                  bucket_throughput, characterize, generate_corpus,
                                  generate_synthetic_trace, load_trace, save_trace, trace_from_rates)
from oracles import attribute_bytes_per_ms


# -- bucketing -------------------------------------------------------------

def test_single_full_bucket_is_20_mbps():
    tr = bucket_throughput([(0, 500, 1_250_000)])
    assert tr.n_buckets == 1
    s = tr.samples[0]
    assert (s.bytes_downloaded, s.active_transfer_ms) == (1_250_000, 500)
    assert s.mbps() == pytest.approx(20.0)


def test_half_active_bucket_rate_uses_active_time():
    s = bucket_throughput([(0, 250, 500_000)]).samples[0]
    assert (s.bytes_downloaded, s.active_transfer_ms) == (500_000, 250)
    assert s.mbps() == pytest.approx(16.0)


def test_transfer_spanning_two_buckets_matches_per_ms_attribution():
    tr = bucket_throughput([(0, 750, 750_000)])
    got = [(s.bytes_downloaded, s.active_transfer_ms) for s in tr.samples]
    want_bytes, want_active = attribute_bytes_per_ms([(0, 750, 750_000)], 500)
    assert got == [(500_000, 500), (250_000, 250)]
    assert [b for b, _ in got] == [int(b) for b in want_bytes]
    assert [a for _, a in got] == want_active


def test_random_logs_match_per_ms_oracle(rng):
    for _ in range(30):
        t = 0
        log = []
        for _ in range(rng.integers(1, 6)):
            t += int(rng.integers(0, 700))
            length = int(rng.integers(1, 1500))
            log.append((t, t + length, int(rng.integers(0, 3_000_000))))
            t += length
        tr = bucket_throughput(log, 500)
        want_bytes, want_active = attribute_bytes_per_ms(log, 500)
        assert [s.active_transfer_ms for s in tr.samples] == want_active
        # cumulative rounding: each bucket within one byte of the exact share
        for s, exact in zip(tr.samples, want_bytes):
            assert abs(s.bytes_downloaded - exact) < 1 + 1e-9
        assert tr.total_bytes() == sum(b for *_, b in log)


def test_idle_gap_becomes_zero_active_bucket():
    tr = bucket_throughput([(0, 100, 1000), (1200, 1300, 1000)])
    assert [s.active_transfer_ms for s in tr.samples] == [100, 0, 100]
    assert tr.rates_mbps()[1] == 0.0


def test_overlapping_transfers_rejected():
    with pytest.raises(TraceFormatError, match="overlaps"):
        bucket_throughput([(0, 600, 10), (500, 700, 10)])


@pytest.mark.parametrize("bad", [[(-1, 10, 5)], [(10, 5, 5)], [(5, 5, 10)]])
def test_invalid_intervals_rejected(bad):
    with pytest.raises(TraceFormatError):
        bucket_throughput(bad)


def test_sample_invariants_enforced():
    with pytest.raises(TraceFormatError):
        ThroughputTrace("x", (ThroughputSample(250, 0, 0),))
    with pytest.raises(TraceFormatError):
        ThroughputTrace("x", (ThroughputSample(0, 10, 0),))
    with pytest.raises(TraceFormatError):
        ThroughputTrace("x", (ThroughputSample(0, 10, 10), ThroughputSample(0, 10, 10)))


# -- synthesis ---------------------------------------------------------------

def test_degenerate_config_gives_constant_trace():
    cfg = SyntheticLinkConfig(mean_throughput=20.0, variance_scale=0.0, outage_rate=0.0,
                              reconfig_dip_fraction=0.0)
    rates = generate_synthetic_trace(cfg, 60_000).rates_mbps()
    assert len(rates) == 120
    assert np.allclose(rates, 20.0)


def test_zero_variance_mean_within_ten_percent_even_with_dips():
    cfg = SyntheticLinkConfig(mean_throughput=20.0, reconfig_dip_fraction=0.3)
    assert generate_synthetic_trace(cfg, 600_000).mean_mbps() == pytest.approx(20.0, rel=0.10)


def test_periodic_dips_at_reconfiguration_period():
    cfg = SyntheticLinkConfig(mean_throughput=20.0, reconfig_dip_fraction=0.5,
                              reconfig_period_ms=15_000, recovery_ms=5_000)
    rates = generate_synthetic_trace(cfg, 120_000).rates_mbps()
    for k in range(1, 8):
        assert rates[k * 30] == pytest.approx(10.0)  # bottom of each dip
        assert rates[k * 30 + 10] == pytest.approx(20.0)  # recovered 5 s later
    assert rates[0] == pytest.approx(20.0)


def test_injected_outages_last_at_least_eight_seconds():
    for seed in range(5):
        cfg = SyntheticLinkConfig(mean_throughput=20.0, outage_rate=30.0, seed=seed)
        rates = lm.synthetic_rates(cfg, 1_800_000)
        runs = lm._runs(rates == 0)
        assert runs, "expected at least one outage"
        assert all(n * 500 >= 8000 for _, n in runs)


def test_same_seed_is_bit_identical_and_different_seed_differs():
    cfg = lm.preset("starlink_like", seed=11)
    a = generate_synthetic_trace(cfg, 120_000)
    b = generate_synthetic_trace(cfg, 120_000)
    assert a == b
    assert a.rates_mbps().tobytes() == b.rates_mbps().tobytes()
    c = generate_synthetic_trace(lm.preset("starlink_like", seed=12), 120_000)
    assert c.rates_mbps().tobytes() != a.rates_mbps().tobytes()


def test_config_validation():
    with pytest.raises(ValueError):
        SyntheticLinkConfig(random_loss_rate=1.0)
    with pytest.raises(ValueError):
        SyntheticLinkConfig(reconfig_dip_fraction=1.5)
    with pytest.raises(ValueError):
        SyntheticLinkConfig(base_rtt_ms=0)
    with pytest.raises(ValueError):
        lm.preset("nope")


def test_corpus_ids_and_labels():
    corpus = generate_corpus("terrestrial_like", 3, 300_000, seed=4)
    assert [t.trace_id for t in corpus] == [f"terrestrial_like-{i:04d}" for i in range(3)]
    assert {t.label for t in corpus} == {"terrestrial_like"}
    assert all(t.duration_ms >= 300_000 for t in corpus)


def test_starlink_corpus_more_variable_than_terrestrial():
    star = generate_corpus("starlink_like", 40, 600_000, seed=1)
    terr = generate_corpus("terrestrial_like", 40, 600_000, seed=1)

    def mean_delta(corpus):
        return np.mean(np.concatenate([np.abs(np.diff(t.rates_mbps())) for t in corpus]))

    def median_recovery(corpus, threshold):
        runs = [r for t in corpus for r in characterize(t, threshold).recovery_times_ms]
        return float(np.median(runs)) if runs else 0.0  # never below: nothing to recover from

    assert mean_delta(star) > mean_delta(terr)
    for threshold in (10.0, 20.0, 30.0):
        assert median_recovery(star, threshold) > median_recovery(terr, threshold)


# -- characterization ----------------------------------------------------------

def test_constant_trace_has_no_recoveries_or_outages():
    rep = characterize(trace_from_rates([20.0] * 100), 10.0)
    assert rep.recovery_times_ms == ()
    assert rep.outage_count == 0 and rep.outage_total_ms == 0


def test_fifteen_second_dip_is_one_recovery():
    rep = characterize(trace_from_rates([20.0] * 10 + [5.0] * 30 + [20.0] * 10), 10.0)
    assert rep.recovery_times_ms == (15_000.0,)


def test_outage_threshold_is_eight_seconds():
    rates = [20.0] * 4 + [0.0] * 18 + [20.0] * 4 + [0.0] * 8 + [20.0] * 4
    rep = characterize(trace_from_rates(rates), 10.0)
    assert rep.outage_count == 1
    assert rep.outage_total_ms == 9000


def test_recovery_plus_above_threshold_covers_duration():
    tr = generate_synthetic_trace(lm.preset("starlink_like", seed=5), 300_000)
    for thr in lm.DEFAULT_THRESHOLDS_MBPS:
        rep = characterize(tr, thr)
        assert sum(rep.recovery_times_ms) + rep.above_threshold_ms == tr.duration_ms
        assert rep.outage_total_ms <= tr.duration_ms


def test_summary_shapes():
    rep = characterize(trace_from_rates([20.0, 5.0, 20.0, 5.0]), 10.0)
    s = rep.summary()
    assert s["recovery_ms"]["n"] == 2
    assert s["overshoot_mbps"]["max"] == pytest.approx(15.0)


# -- files -------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    tr = bucket_throughput([(0, 750, 750_000), (900, 1000, 333)], trace_id="rt", label="starlink_like")
    path = tmp_path / "t.csv"
    save_trace(tr, path)
    assert load_trace(path) == tr
    text = path.read_text().splitlines()
    assert text[0].startswith("#") and "trace_id=rt" in text[0]
    assert text[1] == "bucket_start_ms,bytes_downloaded,active_transfer_ms"


def _write(tmp_path, body):
    p = tmp_path / "x.csv"
    p.write_text("# trace_id=x bucket_ms=500 label=imported\nbucket_start_ms,bytes_downloaded,active_transfer_ms\n"
                 + body)
    return p


def test_three_row_file_loads(tmp_path):
    tr = load_trace(_write(tmp_path, "0,100,500\n500,0,0\n1000,50,250\n"))
    assert len(tr.samples) == 3
    assert tr.trace_id == "x"


def test_empty_trace_error(tmp_path):
    with pytest.raises(TraceFormatError, match="empty trace"):
        load_trace(_write(tmp_path, ""))


@pytest.mark.parametrize("body,row", [
    ("0,100,600\n", "row 3"),
    ("0,100,500\n0,100,500\n", "row 4"),
    ("0,-5,500\n", "row 3"),
    ("0,abc,500\n", "row 3"),
    ("0,1\n", "row 3"),
])
def test_malformed_rows_named(tmp_path, body, row):
    with pytest.raises(TraceFormatError, match=row):
        load_trace(_write(tmp_path, body))


def test_missing_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,c\n0,1,2\n")
    with pytest.raises(TraceFormatError, match="header"):
        load_trace(p)


def test_link_config_round_trip(tmp_path):
    cfg = lm.preset("starlink_like", seed=9)
    p = tmp_path / "link.ini"
    lm.save_link_config(cfg, p)
    assert lm.load_link_config(p) == cfg
    with pytest.raises(ValueError, match="unknown"):
        lm.link_config_from_mapping({"mean_thruput": "3"})
