"""Throughput traces: bucketing, synthesis, characterization and file I/O.

A trace is a sequence of fixed-width buckets (500 ms by default). Each bucket
records the bytes downloaded and the time a transfer was actually active, so
bucket throughput is ``bytes / active time``. Buckets with no active transfer
are kept as samples with ``active_transfer_ms == 0`` and read as zero rate.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BUCKET_MS = 500
OUTAGE_MIN_MS = 8000
# mean length an injected outage lasts beyond the floor
OUTAGE_MEAN_EXCESS_MS = 20000.0
# log-throughput noise: sum of a fast and a slow AR(1) process, unit variance overall
NOISE_FAST_CORRELATION_MS = 2000.0
NOISE_SLOW_CORRELATION_MS = 60000.0
NOISE_SLOW_SHARE = 0.7
DEFAULT_THRESHOLDS_MBPS = (10.0, 20.0)

LABELS = ("starlink_like", "terrestrial_like", "imported")
HEADER = ("bucket_start_ms", "bytes_downloaded", "active_transfer_ms")


class TraceFormatError(ValueError):
    """Raised for malformed trace or transfer input."""


def bytes_per_ms(mbps: float) -> float:
    return mbps * 125.0


@dataclass(frozen=True)
class ThroughputSample:
    bucket_start: int
    bytes_downloaded: int
    active_transfer_ms: float

    def mbps(self) -> float:
        if self.active_transfer_ms <= 0:
            return 0.0
        return self.bytes_downloaded / (125.0 * self.active_transfer_ms)


@dataclass(frozen=True)
class ThroughputTrace:
    trace_id: str
    samples: tuple[ThroughputSample, ...]
    bucket_ms: int = BUCKET_MS
    label: str = "imported"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.bucket_ms <= 0:
            raise TraceFormatError("bucket_ms must be positive")
        if self.label not in LABELS:
            raise TraceFormatError(f"unknown trace label {self.label!r}")
        if not self.samples:
            raise TraceFormatError("empty trace")
        prev = None
        for i, s in enumerate(self.samples):
            _check_sample(s, self.bucket_ms, i)
            if prev is not None and s.bucket_start <= prev:
                raise TraceFormatError(f"sample {i}: bucket_start not strictly increasing")
            prev = s.bucket_start

    @cached_property
    def n_buckets(self) -> int:
        return self.samples[-1].bucket_start // self.bucket_ms + 1

    @property
    def duration_ms(self) -> int:
        return self.n_buckets * self.bucket_ms

    @cached_property
    def _rates(self) -> np.ndarray:
        rates = np.zeros(self.n_buckets)
        for s in self.samples:
            rates[s.bucket_start // self.bucket_ms] = s.mbps()
        rates.flags.writeable = False
        return rates

    def rates_mbps(self) -> np.ndarray:
        """Dense per-bucket throughput in Mb/s; missing and idle buckets are 0."""
        return self._rates

    def total_bytes(self) -> int:
        return sum(s.bytes_downloaded for s in self.samples)

    def mean_mbps(self) -> float:
        return float(self._rates.mean())


def _check_sample(s: ThroughputSample, bucket_ms: int, row) -> None:
    if s.bucket_start < 0 or s.bucket_start % bucket_ms:
        raise TraceFormatError(f"row {row}: bucket_start {s.bucket_start} is not a multiple of {bucket_ms}")
    if s.bytes_downloaded < 0:
        raise TraceFormatError(f"row {row}: negative bytes_downloaded")
    if not 0 <= s.active_transfer_ms <= bucket_ms:
        raise TraceFormatError(
            f"row {row}: active_transfer_ms {s.active_transfer_ms} outside [0, {bucket_ms}]")
    if s.active_transfer_ms == 0 and s.bytes_downloaded != 0:
        raise TraceFormatError(f"row {row}: bytes downloaded with no active transfer time")


def trace_from_rates(rates_mbps: Sequence[float], bucket_ms: int = BUCKET_MS,
                     trace_id: str = "trace", label: str = "imported") -> ThroughputTrace:
    """Build a fully-active trace from per-bucket rates (Mb/s)."""
    samples = []
    for i, r in enumerate(rates_mbps):
        if r < 0:
            raise TraceFormatError(f"bucket {i}: negative rate")
        samples.append(ThroughputSample(i * bucket_ms, int(round(r * 125.0 * bucket_ms)), bucket_ms))
    return ThroughputTrace(trace_id, tuple(samples), bucket_ms, label)


def bucket_throughput(raw_transfers: Iterable[tuple[float, float, int]], bucket_ms: int = BUCKET_MS,
                      trace_id: str = "bucketed", label: str = "imported") -> ThroughputTrace:
    """Bucket a log of ``(start_ms, end_ms, bytes)`` transfers.

    Bytes are split across buckets in proportion to time overlap, using
    cumulative integer rounding so the bucket totals add up exactly to the
    input. Transfers must not overlap each other.
    """
    if bucket_ms <= 0:
        raise TraceFormatError("bucket_ms must be positive")
    transfers = sorted((Fraction(s), Fraction(e), int(b)) for s, e, b in raw_transfers)
    if not transfers:
        raise TraceFormatError("empty trace")
    for i, (s, e, b) in enumerate(transfers):
        if s < 0 or e < s or b < 0:
            raise TraceFormatError(f"transfer {i}: invalid interval or byte count")
        if e == s and b > 0:
            raise TraceFormatError(f"transfer {i}: bytes over a zero-length interval")
        if i and s < transfers[i - 1][1]:
            raise TraceFormatError(f"transfer {i}: overlaps the previous transfer")

    last_end = max(e for _, e, _ in transfers)
    n = max(1, math.ceil(last_end / bucket_ms))
    nbytes = [0] * n
    active = [Fraction(0)] * n
    for s, e, b in transfers:
        if e == s:
            continue
        span = e - s
        k = int(s // bucket_ms)
        done = 0
        while k < n and k * bucket_ms < e:
            lo = max(s, Fraction(k * bucket_ms))
            hi = min(e, Fraction((k + 1) * bucket_ms))
            if hi > lo:
                cum = math.floor(b * (hi - s) / span)
                nbytes[k] += cum - done
                done = cum
                active[k] += hi - lo
            k += 1
    samples = tuple(
        ThroughputSample(k * bucket_ms, nbytes[k], _num(active[k])) for k in range(n))
    return ThroughputTrace(trace_id, samples, bucket_ms, label)


def _num(x: Fraction):
    return int(x) if x.denominator == 1 else float(x)


@dataclass(frozen=True)
class SyntheticLinkConfig:
    mean_throughput: float = 20.0
    variance_scale: float = 0.0
    reconfig_period_ms: float = 15000.0
    reconfig_dip_fraction: float = 0.0
    recovery_ms: float = 5000.0
    outage_rate: float = 0.0
    outage_min_ms: float = OUTAGE_MIN_MS
    base_rtt_ms: float = 40.0
    random_loss_rate: float = 0.0
    queue_capacity_bytes: int = 250_000
    seed: int = 0

    def __post_init__(self):
        for name in ("reconfig_period_ms", "recovery_ms", "outage_min_ms", "base_rtt_ms"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.mean_throughput < 0 or self.variance_scale < 0 or self.outage_rate < 0:
            raise ValueError("mean_throughput, variance_scale and outage_rate must be >= 0")
        if not 0 <= self.reconfig_dip_fraction <= 1:
            raise ValueError("reconfig_dip_fraction must be in [0, 1]")
        if not 0 <= self.random_loss_rate < 1:
            raise ValueError("random_loss_rate must be in [0, 1)")
        if self.queue_capacity_bytes <= 0:
            raise ValueError("queue_capacity_bytes must be > 0")


PRESETS = {
    "starlink_like": SyntheticLinkConfig(
        mean_throughput=15.0, variance_scale=0.8, reconfig_period_ms=15000.0,
        reconfig_dip_fraction=0.85, recovery_ms=9000.0, outage_rate=8.0,
        base_rtt_ms=40.0, random_loss_rate=0.005, queue_capacity_bytes=250_000),
    "terrestrial_like": SyntheticLinkConfig(
        mean_throughput=40.0, variance_scale=0.15, reconfig_period_ms=15000.0,
        reconfig_dip_fraction=0.0, recovery_ms=5000.0, outage_rate=0.0,
        base_rtt_ms=20.0, random_loss_rate=0.0001, queue_capacity_bytes=250_000),
}


def preset(name: str, **overrides) -> SyntheticLinkConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return dataclasses.replace(cfg, **overrides)


def synthetic_rates(config: SyntheticLinkConfig, duration_ms: float,
                    bucket_ms: int = BUCKET_MS) -> np.ndarray:
    """Per-bucket rates (Mb/s) of the synthetic link model."""
    if duration_ms < bucket_ms:
        raise ValueError("duration_ms must cover at least one bucket")
    n = math.ceil(duration_ms / bucket_ms)
    rng = np.random.default_rng(config.seed)
    # draw order is fixed so configs differing only in scale share the same noise
    z = rng.standard_normal((2, n))
    n_out = rng.poisson(config.outage_rate * n * bucket_ms / 3.6e6)
    out_start = rng.uniform(0.0, 1.0, size=n_out)
    out_excess = rng.exponential(OUTAGE_MEAN_EXCESS_MS, size=n_out)

    s = config.variance_scale
    x = (math.sqrt(1.0 - NOISE_SLOW_SHARE) * _ar1(z[0], bucket_ms / NOISE_FAST_CORRELATION_MS)
         + math.sqrt(NOISE_SLOW_SHARE) * _ar1(z[1], bucket_ms / NOISE_SLOW_CORRELATION_MS))
    rates = config.mean_throughput * np.exp(s * x - 0.5 * s * s)

    if config.reconfig_dip_fraction > 0:
        t = np.arange(n) * bucket_ms
        phase = t % config.reconfig_period_ms
        in_dip = (t >= config.reconfig_period_ms) & (phase < config.recovery_ms)
        depth = config.reconfig_dip_fraction * (1.0 - phase / config.recovery_ms)
        rates = np.where(in_dip, rates * (1.0 - depth), rates)

    for u, excess in zip(out_start, out_excess):
        length = math.ceil((config.outage_min_ms + excess) / bucket_ms)
        if length > n:
            continue
        k0 = int(u * (n - length + 1))
        rates[k0:k0 + length] = 0.0
    return rates


def _ar1(z: np.ndarray, step: float) -> np.ndarray:
    """Stationary unit-variance AR(1) driven by ``z`` with lag-one weight exp(-step)."""
    phi = math.exp(-step)
    innov = math.sqrt(1.0 - phi * phi)
    x = np.empty_like(z)
    x[0] = z[0]
    for k in range(1, len(z)):
        x[k] = phi * x[k - 1] + innov * z[k]
    return x


def generate_synthetic_trace(config: SyntheticLinkConfig, duration_ms: float,
                             bucket_ms: int = BUCKET_MS, trace_id: str | None = None,
                             label: str = "imported") -> ThroughputTrace:
    rates = synthetic_rates(config, duration_ms, bucket_ms)
    return trace_from_rates(rates, bucket_ms, trace_id or f"synthetic-{config.seed}", label)


def generate_corpus(name: str, n_traces: int, duration_ms: float = 600_000,
                    seed: int = 0, **overrides) -> list[ThroughputTrace]:
    """``n_traces`` traces from a named preset, each with its own derived seed."""
    base = preset(name, **overrides)
    seqs = np.random.SeedSequence([seed, _stable_hash(name)]).spawn(n_traces)
    traces = []
    for i, sq in enumerate(seqs):
        cfg = dataclasses.replace(base, seed=int(sq.generate_state(1)[0]))
        traces.append(generate_synthetic_trace(cfg, duration_ms, trace_id=f"{name}-{i:04d}", label=name))
    return traces


def _stable_hash(text: str) -> int:
    return int.from_bytes(text.encode()[:8].ljust(8, b"\0"), "little")


@dataclass(frozen=True)
class VarianceReport:
    overshoot_magnitudes: tuple[float, ...]
    recovery_times_ms: tuple[float, ...]
    outage_count: int
    outage_total_ms: float
    threshold_mbps: float = 10.0
    above_threshold_ms: float = 0.0
    duration_ms: float = 0.0

    def summary(self) -> dict:
        def q(xs):
            if not xs:
                return {"n": 0}
            a = np.asarray(xs)
            return {"n": len(a), "mean": float(a.mean()), "p50": float(np.quantile(a, 0.5)),
                    "p80": float(np.quantile(a, 0.8)), "max": float(a.max())}
        return {"overshoot_mbps": q(self.overshoot_magnitudes),
                "recovery_ms": q(self.recovery_times_ms),
                "outage_count": self.outage_count, "outage_total_ms": self.outage_total_ms}


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """(start, length) of maximal True runs."""
    if not mask.any():
        return []
    padded = np.concatenate(([False], mask, [False])).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return [(int(a), int(b - a)) for a, b in zip(edges[::2], edges[1::2])]


def characterize(trace: ThroughputTrace, threshold_mbps: float = 10.0) -> VarianceReport:
    """Bucket-to-bucket deltas, sub-threshold recovery times and outages.

    A run below the threshold that is still open at the end of the trace is
    counted with its truncated length.
    """
    rates = trace.rates_mbps()
    bms = trace.bucket_ms
    below = rates < threshold_mbps
    recovery = tuple(float(n * bms) for _, n in _runs(below))
    outages = [n * bms for _, n in _runs(rates == 0) if n * bms >= OUTAGE_MIN_MS]
    return VarianceReport(
        overshoot_magnitudes=tuple(np.abs(np.diff(rates)).tolist()),
        recovery_times_ms=recovery,
        outage_count=len(outages),
        outage_total_ms=float(sum(outages)),
        threshold_mbps=threshold_mbps,
        above_threshold_ms=float((~below).sum() * bms),
        duration_ms=float(trace.duration_ms),
    )


def save_trace(trace: ThroughputTrace, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        f.write(f"# trace_id={trace.trace_id} bucket_ms={trace.bucket_ms} label={trace.label}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HEADER)
        for s in trace.samples:
            w.writerow((s.bucket_start, s.bytes_downloaded, _fmt(s.active_transfer_ms)))


def _fmt(x) -> str:
    if float(x).is_integer():
        return str(int(x))
    return repr(float(x))


def load_trace(path) -> ThroughputTrace:
    path = Path(path)
    meta = {"trace_id": path.stem, "bucket_ms": str(BUCKET_MS), "label": "imported"}
    samples = []
    with path.open(encoding="utf-8", newline="") as f:
        lines = f.read().splitlines()
    rows = []
    for lineno, line in enumerate(lines, 1):
        if line.startswith("#"):
            for tok in line[1:].split():
                key, _, val = tok.partition("=")
                if key in meta and val:
                    meta[key] = val
        elif line.strip():
            rows.append((lineno, line))
    if not rows or tuple(c.strip() for c in rows[0][1].split(",")) != HEADER:
        raise TraceFormatError(f"{path}: missing header {','.join(HEADER)}")
    try:
        bucket_ms = int(meta["bucket_ms"])
    except ValueError:
        raise TraceFormatError(f"{path}: bad bucket_ms {meta['bucket_ms']!r}") from None
    prev = None
    body = rows[1:]
    for (lineno, _), rec in zip(body, csv.reader([r for _, r in body])):
        if len(rec) != 3:
            raise TraceFormatError(f"{path}: row {lineno}: expected 3 fields, got {len(rec)}")
        try:
            start = int(rec[0])
            nbytes = int(rec[1])
            active = float(rec[2])
        except ValueError:
            raise TraceFormatError(f"{path}: row {lineno}: non-numeric field") from None
        if active.is_integer():
            active = int(active)
        sample = ThroughputSample(start, nbytes, active)
        _check_sample(sample, bucket_ms, lineno)
        if prev is not None and start <= prev:
            raise TraceFormatError(f"{path}: row {lineno}: bucket_start not strictly increasing")
        prev = start
        samples.append(sample)
    if not samples:
        raise TraceFormatError(f"{path}: empty trace")
    return ThroughputTrace(meta["trace_id"], tuple(samples), bucket_ms, meta["label"])


def load_link_config(path) -> SyntheticLinkConfig:
    """Read a ``[link]`` key-value file whose keys are SyntheticLinkConfig fields."""
    parser = configparser.ConfigParser()
    parser.read(path, encoding="utf-8")
    section = parser["link"] if parser.has_section("link") else parser.defaults()
    return link_config_from_mapping(dict(section))


def link_config_from_mapping(values: dict) -> SyntheticLinkConfig:
    types = {f.name: f.type for f in dataclasses.fields(SyntheticLinkConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key not in types:
            raise ValueError(f"unknown link config key {key!r}")
        kwargs[key] = int(raw) if types[key] == "int" else float(raw)
    return SyntheticLinkConfig(**kwargs)


def save_link_config(config: SyntheticLinkConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser["link"] = {k: str(v) for k, v in dataclasses.asdict(config).items()}
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)
