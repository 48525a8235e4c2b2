"""Rate/buffer hybrid ABR: EWMA throughput estimate, discounts, rung choice."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .link_model import ThroughputTrace

SWEEP_RANGES = {
    "smoothing_half_life_ms": (0.0, 300_000.0),
    "throughput_discount_frac": (0.0, 0.6),
    "buffer_discount_threshold_ms": (0.0, 100_000.0),
}
LADDER_HEADER = ("rung", "bitrate_kbps", "resolution", "chunk_index", "size_bytes", "vmaf")


@dataclass(frozen=True)
class AbrParams:
    smoothing_half_life_ms: float = 100_000.0
    throughput_discount_frac: float = 0.15
    buffer_discount_threshold_ms: float = 50_000.0
    low_buffer_discount_frac: float = 0.50
    high_buffer_discount_frac: float = 0.05

    def __post_init__(self):
        if self.smoothing_half_life_ms < 0 or self.buffer_discount_threshold_ms < 0:
            raise ValueError("half-life and buffer threshold must be >= 0")
        for name in ("throughput_discount_frac", "low_buffer_discount_frac",
                     "high_buffer_discount_frac"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.low_buffer_discount_frac < self.high_buffer_discount_frac:
            raise ValueError("low_buffer_discount_frac must be >= high_buffer_discount_frac")


def abr_params_from_mapping(values: dict) -> AbrParams:
    names = {f.name for f in dataclasses.fields(AbrParams)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown ABR parameter(s): {', '.join(sorted(unknown))}")
    return AbrParams(**{k: float(v) for k, v in values.items()})


def load_abr_params(path) -> AbrParams:
    parser = configparser.ConfigParser()
    parser.read(path, encoding="utf-8")
    section = parser["abr"] if parser.has_section("abr") else parser.defaults()
    return abr_params_from_mapping(dict(section))


@dataclass(frozen=True)
class ThroughputEstimator:
    estimate_mbps: float | None = None
    last_update_ms: float = 0.0
    half_life_ms: float = 100_000.0
    lo: float = math.inf
    hi: float = -math.inf

    @property
    def seeded(self) -> bool:
        return self.estimate_mbps is not None


def ewma_update(est: ThroughputEstimator, sample_mbps: float, dt_ms: float) -> ThroughputEstimator:
    """Decay the old estimate toward ``sample_mbps`` held for ``dt_ms``.

    An unseeded estimator takes the first sample as its estimate.
    """
    if dt_ms <= 0:
        raise ValueError("dt_ms must be positive")
    if sample_mbps < 0:
        raise ValueError("throughput samples must be >= 0")
    if est.estimate_mbps is None or est.half_life_ms == 0:
        value = sample_mbps
    else:
        keep = 2.0 ** (-dt_ms / est.half_life_ms)
        value = sample_mbps + (est.estimate_mbps - sample_mbps) * keep
        # rounding must not push the estimate outside the samples seen
        value = min(max(value, min(est.lo, sample_mbps)), max(est.hi, sample_mbps))
    return dataclasses.replace(est, estimate_mbps=value, last_update_ms=est.last_update_ms + dt_ms,
                               lo=min(est.lo, sample_mbps), hi=max(est.hi, sample_mbps))


def effective_throughput(estimate_mbps: float, buffer_ms: float, params: AbrParams) -> float:
    if estimate_mbps < 0:
        raise ValueError("estimate must be >= 0")
    gate = (params.low_buffer_discount_frac if buffer_ms < params.buffer_discount_threshold_ms
            else params.high_buffer_discount_frac)
    return estimate_mbps * (1.0 - params.throughput_discount_frac) * (1.0 - gate)


@dataclass(frozen=True)
class Rung:
    bitrate_kbps: float
    resolution: str
    chunk_duration_ms: float
    chunks: tuple[tuple[int, float], ...]  # (size_bytes, vmaf) per chunk


@dataclass(frozen=True)
class BitrateLadder:
    rungs: tuple[Rung, ...]

    def __post_init__(self):
        object.__setattr__(self, "rungs", tuple(self.rungs))
        if not self.rungs:
            raise ValueError("ladder needs at least one rung")
        first = self.rungs[0]
        for i, r in enumerate(self.rungs):
            if i and r.bitrate_kbps <= self.rungs[i - 1].bitrate_kbps:
                raise ValueError("rungs must be strictly ascending in bitrate")
            if len(r.chunks) != len(first.chunks) or r.chunk_duration_ms != first.chunk_duration_ms:
                raise ValueError("all rungs need equal chunk counts and durations")
            for size, vmaf in r.chunks:
                if size <= 0 or not 0 <= vmaf <= 100:
                    raise ValueError(f"rung {i}: invalid chunk size or vmaf")
        for c in range(len(first.chunks)):
            v = [r.chunks[c][1] for r in self.rungs]
            if any(b < a for a, b in zip(v, v[1:])):
                raise ValueError(f"chunk {c}: vmaf decreases with rung")

    @property
    def n_chunks(self) -> int:
        return len(self.rungs[0].chunks)

    @property
    def chunk_duration_ms(self) -> float:
        return self.rungs[0].chunk_duration_ms

    @property
    def top(self) -> int:
        return len(self.rungs) - 1

    def bitrate_mbps(self, rung: int) -> float:
        return self.rungs[rung].bitrate_kbps / 1000.0

    def size(self, rung: int, chunk: int) -> int:
        return self.rungs[rung].chunks[chunk][0]

    def vmaf(self, rung: int, chunk: int) -> float:
        return self.rungs[rung].chunks[chunk][1]

    def max_vmaf(self, chunk: int) -> float:
        return max(r.chunks[chunk][1] for r in self.rungs)


DEFAULT_BITRATES_KBPS = (235, 375, 560, 750, 1050, 1750, 2350, 3000, 4300, 5800, 8000, 16000)
_RESOLUTIONS = ("320x240", "384x288", "512x384", "512x384", "640x480", "720x480", "1280x720",
                "1280x720", "1920x1080", "1920x1080", "1920x1080", "3840x2160")


def synthetic_ladder(n_chunks: int = 150, chunk_duration_ms: float = 4000.0,
                     bitrates_kbps=DEFAULT_BITRATES_KBPS, seed: int = 0) -> BitrateLadder:
    """A VBR ladder whose VMAF saturates with bitrate, scaled by per-chunk complexity."""
    rng = np.random.default_rng(seed)
    complexity = np.exp(rng.normal(0.0, 0.25, size=n_chunks))
    size_jitter = np.exp(rng.normal(0.0, 0.1, size=n_chunks))
    rungs = []
    for i, kbps in enumerate(bitrates_kbps):
        chunks = []
        for c in range(n_chunks):
            nbytes = int(round(kbps * chunk_duration_ms / 8 * size_jitter[c]))
            vmaf = 100.0 * (1.0 - math.exp(-kbps / (1200.0 * complexity[c])))
            chunks.append((max(1, nbytes), round(vmaf, 3)))
        res = _RESOLUTIONS[i] if i < len(_RESOLUTIONS) else "3840x2160"
        rungs.append(Rung(float(kbps), res, chunk_duration_ms, tuple(chunks)))
    return BitrateLadder(tuple(rungs))


def save_ladder(ladder: BitrateLadder, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        f.write(f"# chunk_duration_ms={ladder.chunk_duration_ms:g}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LADDER_HEADER)
        for i, r in enumerate(ladder.rungs):
            for c, (size, vmaf) in enumerate(r.chunks):
                w.writerow((i, f"{r.bitrate_kbps:g}", r.resolution, c, size, repr(float(vmaf))))


def load_ladder(path) -> BitrateLadder:
    path = Path(path)
    duration = 4000.0
    with path.open(encoding="utf-8", newline="") as f:
        lines = f.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            for tok in line[1:].split():
                key, _, val = tok.partition("=")
                if key == "chunk_duration_ms":
                    duration = float(val)
        elif line.strip():
            body.append(line)
    reader = csv.DictReader(body)
    if tuple(reader.fieldnames or ()) != LADDER_HEADER:
        raise ValueError(f"{path}: expected header {','.join(LADDER_HEADER)}")
    rungs: dict[int, dict] = {}
    for lineno, row in enumerate(reader, 2):
        try:
            i, c = int(row["rung"]), int(row["chunk_index"])
            entry = rungs.setdefault(i, {"kbps": float(row["bitrate_kbps"]),
                                         "res": row["resolution"], "chunks": {}})
            entry["chunks"][c] = (int(row["size_bytes"]), float(row["vmaf"]))
        except (TypeError, ValueError):
            raise ValueError(f"{path}: malformed ladder row {lineno}") from None
    out = []
    for i in sorted(rungs):
        e = rungs[i]
        chunks = tuple(e["chunks"][c] for c in sorted(e["chunks"]))
        out.append(Rung(e["kbps"], e["res"], duration, chunks))
    return BitrateLadder(tuple(out))


@dataclass(frozen=True)
class AbrDecision:
    chunk_index: int
    rung_index: int
    effective_throughput_mbps: float
    buffer_at_decision_ms: float


def select_bitrate(eff_mbps: float, buffer_ms: float, ladder: BitrateLadder,
                   chunk_index: int) -> AbrDecision:
    """Highest rung that is at most ``eff_mbps`` and downloads before the buffer runs dry.

    Falls back to rung 0 when no rung qualifies.
    """
    if not 0 <= chunk_index < ladder.n_chunks:
        raise IndexError(f"chunk_index {chunk_index} outside ladder")
    budget_ms = buffer_ms + ladder.chunk_duration_ms
    chosen = 0
    if eff_mbps > 0:
        for i in range(ladder.top, -1, -1):
            if ladder.bitrate_mbps(i) > eff_mbps:
                continue
            download_ms = ladder.size(i, chunk_index) / (eff_mbps * 125.0)
            if download_ms <= budget_ms:
                chosen = i
                break
    return AbrDecision(chunk_index, chosen, eff_mbps, buffer_ms)


def overestimation_frequency(trace: ThroughputTrace, half_life_ms: float) -> float:
    """Share of buckets whose realized rate falls below the lagged EWMA estimate.

    The estimate compared against bucket k has seen buckets 0..k-1 only.
    """
    rates = trace.rates_mbps()
    if len(rates) < 2:
        return 0.0
    est = ThroughputEstimator(half_life_ms=half_life_ms)
    over = 0
    for k, r in enumerate(rates):
        if k and est.estimate_mbps > r:
            over += 1
        est = ewma_update(est, float(r), trace.bucket_ms)
    return over / (len(rates) - 1)
