"""Trace-driven playback: sequential chunk downloads, buffer, stalls, ABR calls.

Throughput is piecewise constant per trace bucket, so the simulator jumps
between events (bucket edges, download completion, buffer empty, buffer room,
trace end) and is exact for that rate model.

Rules shared with the dense reference in the tests:

* the estimator is fed bucket ``k``'s rate at the end of bucket ``k`` if a
  download was active for part of it; until then decisions use rung 0, except
  that the first completed chunk seeds the estimator with the rate of the
  bucket it completed in (its first observation);
* a download starts as soon as the buffer has room for one more chunk;
* playback starts, and a stall ends, once the buffer reaches
  ``startup_buffer_ms`` (or nothing is left to download);
* at a tie, a completing download wins over the buffer running dry.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

from .abr import (AbrDecision, AbrParams, BitrateLadder, ThroughputEstimator,
                  effective_throughput, ewma_update, select_bitrate)
from .link_model import ThroughputTrace

SCHEMA_VERSION = 1
EPS = 1e-9


@dataclass(frozen=True)
class PlayerConfig:
    max_buffer_ms: float = 240_000.0
    startup_buffer_ms: float = 4_000.0
    throughput_source: str = "trace_direct"

    def __post_init__(self):
        if self.startup_buffer_ms < 0 or self.max_buffer_ms <= 0:
            raise ValueError("buffer sizes must be positive")
        if self.startup_buffer_ms > self.max_buffer_ms:
            raise ValueError("startup_buffer_ms must not exceed max_buffer_ms")
        if self.throughput_source not in ("trace_direct", "congestion_coupled"):
            raise ValueError(f"unknown throughput_source {self.throughput_source!r}")


@dataclass(frozen=True)
class SessionResult:
    trace_id: str
    decisions: tuple[AbrDecision, ...]
    chunk_downloads: tuple[tuple[float, float, int], ...]
    buffer_timeline: tuple[tuple[float, float], ...]
    rebuffer_events: tuple[tuple[float, float], ...]
    play_delay_ms: float | None
    switch_count: int
    session_duration_ms: float
    played_ms: float
    chunk_duration_ms: float
    bytes_downloaded: int = 0
    degenerate: bool = False
    decision_times_ms: tuple[float, ...] = ()

    @property
    def rebuffer_total_ms(self) -> float:
        return sum((d for _, d in self.rebuffer_events), 0.0)

    def to_record(self) -> dict:
        rec = dataclasses.asdict(self)
        rec["schema_version"] = SCHEMA_VERSION
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_record(cls, rec: dict) -> "SessionResult":
        rec = dict(rec)
        version = rec.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported session schema version {version}")
        rec["decisions"] = tuple(AbrDecision(**d) for d in rec["decisions"])
        for key in ("chunk_downloads", "buffer_timeline", "rebuffer_events"):
            rec[key] = tuple(tuple(x) for x in rec[key])
        rec["decision_times_ms"] = tuple(rec.get("decision_times_ms", ()))
        return cls(**rec)


def count_switches(decisions) -> int:
    return sum(1 for a, b in zip(decisions, decisions[1:]) if a.rung_index != b.rung_index)


class _Player:
    """Mutable playback state shared by the event loop."""

    def __init__(self, ladder, params, player):
        self.ladder = ladder
        self.params = params
        self.cfg = player
        self.dur = ladder.chunk_duration_ms
        self.t = 0.0
        self.buffer = 0.0
        self.started = False
        self.stalled_since = None
        self.play_delay = None
        self.played = 0.0
        self.next_chunk = 0
        self.dl = None  # [chunk, rung, remaining_bytes, start_ms]
        self.est = ThroughputEstimator(half_life_ms=params.smoothing_half_life_ms)
        self.decisions = []
        self.decision_times = []
        self.downloads = []
        self.rebuffers = []
        self.timeline = [(0.0, 0.0)]
        self.nbytes = 0
        self.finished = False

    @property
    def playing(self) -> bool:
        return self.started and self.stalled_since is None and not self.finished

    @property
    def fetching_done(self) -> bool:
        return self.dl is None and self.next_chunk >= self.ladder.n_chunks

    def advance(self, dt: float, rate_bpms: float) -> None:
        if dt <= 0:
            return
        if self.playing:
            self.buffer = max(0.0, self.buffer - dt)
            self.played += dt
        if self.dl is not None:
            self.dl[2] -= rate_bpms * dt
        self.t += dt

    def complete_download(self) -> None:
        chunk, rung, _, start = self.dl
        self.dl = None
        self.buffer += self.dur
        self.downloads.append((start, self.t, rung))
        self.nbytes += self.ladder.size(rung, chunk)
        self._maybe_resume()

    def _maybe_resume(self) -> None:
        ready = self.buffer >= self.cfg.startup_buffer_ms - EPS or self.fetching_done
        if not ready:
            return
        if not self.started:
            self.started = True
            self.play_delay = self.t
        elif self.stalled_since is not None:
            self.rebuffers.append((self.stalled_since, self.t - self.stalled_since))
            self.stalled_since = None

    def check_empty(self) -> None:
        if self.playing and self.buffer <= EPS:
            self.buffer = 0.0
            if self.fetching_done:
                self.finished = True
            else:
                self.stalled_since = self.t

    def has_room(self) -> bool:
        return self.buffer + self.dur <= self.cfg.max_buffer_ms + EPS

    def maybe_start_download(self) -> bool:
        if self.dl is not None or self.next_chunk >= self.ladder.n_chunks or not self.has_room():
            return False
        c = self.next_chunk
        if self.est.seeded:
            eff = effective_throughput(self.est.estimate_mbps, self.buffer, self.params)
            decision = select_bitrate(eff, self.buffer, self.ladder, c)
        else:
            decision = AbrDecision(c, 0, 0.0, self.buffer)
        self.decisions.append(decision)
        self.decision_times.append(self.t)
        self.dl = [c, decision.rung_index, float(self.ladder.size(decision.rung_index, c)), self.t]
        self.next_chunk += 1
        return True

    def observe(self, rate_mbps: float, dt_ms: float) -> None:
        self.est = ewma_update(self.est, rate_mbps, dt_ms)

    def mark(self) -> None:
        if self.timeline[-1] != (self.t, self.buffer):
            self.timeline.append((self.t, self.buffer))

    def close(self, trace_id: str) -> SessionResult:
        if self.stalled_since is not None:
            self.rebuffers.append((self.stalled_since, self.t - self.stalled_since))
            self.stalled_since = None
        self.mark()
        return SessionResult(
            trace_id=trace_id,
            decisions=tuple(self.decisions),
            chunk_downloads=tuple(self.downloads),
            buffer_timeline=tuple(self.timeline),
            rebuffer_events=tuple(self.rebuffers),
            play_delay_ms=self.play_delay,
            switch_count=count_switches(self.decisions),
            session_duration_ms=self.t,
            played_ms=self.played,
            chunk_duration_ms=self.dur,
            bytes_downloaded=self.nbytes,
            degenerate=not self.downloads,
            decision_times_ms=tuple(self.decision_times),
        )


def simulate_session(trace: ThroughputTrace, ladder: BitrateLadder, params: AbrParams | None = None,
                     player: PlayerConfig | None = None, cc_path=None) -> SessionResult:
    """Stream ``ladder`` over ``trace``; ends when playback finishes or the trace does.

    ``cc_path`` (a :class:`~leostream.congestion.PathModel` template) is used in
    ``congestion_coupled`` mode, where each chunk's download time comes from a
    simulated New Reno transfer over the trace starting at the request time.
    """
    params = params or AbrParams()
    player = player or PlayerConfig()
    if player.startup_buffer_ms > player.max_buffer_ms - ladder.chunk_duration_ms + EPS:
        raise ValueError("startup_buffer_ms must leave room for one chunk below max_buffer_ms")
    if player.throughput_source == "congestion_coupled":
        return _simulate_coupled(trace, ladder, params, player, cc_path)

    rates = trace.rates_mbps().tolist()
    bms = trace.bucket_ms
    end = float(trace.duration_ms)
    p = _Player(ladder, params, player)
    p.maybe_start_download()
    k = 0
    active = False
    while not p.finished and p.t < end - EPS:
        bucket_end = (k + 1) * bms
        rate = rates[k] * 125.0
        candidates = [bucket_end]
        if p.dl is not None and rate > 0:
            candidates.append(p.t + max(0.0, p.dl[2]) / rate)
        if p.playing:
            candidates.append(p.t + p.buffer)
            if p.dl is None and not p.has_room():
                candidates.append(p.t + p.buffer + p.dur - player.max_buffer_ms)
        t_next = min(candidates)
        dt = t_next - p.t
        if p.dl is not None and dt > EPS:
            active = True
        p.advance(dt, rate)
        if abs(p.t - bucket_end) <= EPS:
            p.t = float(bucket_end)
        if p.dl is not None and p.dl[2] <= EPS * max(1.0, rate):
            if not p.est.seeded:
                p.observe(float(rates[k]), bms)
            p.complete_download()
        if p.t >= bucket_end:
            if active:
                p.observe(float(rates[k]), bms)
            active = False
            k += 1
        p.check_empty()
        p.maybe_start_download()
        p.mark()
    return p.close(trace.trace_id)


def _simulate_coupled(trace, ladder, params, player, cc_path) -> SessionResult:
    from .congestion import PathModel, simulate_transfer

    if cc_path is None:
        cc_path = PathModel(base_rtt_ms=40.0, bottleneck=trace)
    end = float(trace.duration_ms)
    p = _Player(ladder, params, player)
    p.maybe_start_download()
    finish_at = None
    while not p.finished and p.t < end - EPS:
        if p.dl is not None and finish_at is None:
            chunk, rung, nbytes, start = p.dl
            path = dataclasses.replace(cc_path, bottleneck=trace, trace_offset_ms=start,
                                       seed=hash((cc_path.seed, chunk)) & 0x7FFFFFFF)
            res = simulate_transfer("reno", path, int(nbytes), max_sim_ms=end - start)
            finish_at = start + res.duration_ms if res.complete else math.inf
        candidates = [end]
        if finish_at is not None:
            candidates.append(finish_at)
        if p.playing:
            candidates.append(p.t + p.buffer)
            if p.dl is None and not p.has_room():
                candidates.append(p.t + p.buffer + p.dur - player.max_buffer_ms)
        t_next = min(candidates)
        p.advance(t_next - p.t, 0.0)
        if finish_at is not None and p.t >= finish_at - EPS:
            start = p.dl[3]
            took = p.t - start
            p.dl[2] = 0.0
            nbytes = ladder.size(p.dl[1], p.dl[0])
            p.complete_download()
            if took > 0:
                p.observe(nbytes / (125.0 * took), took)
            finish_at = None
        p.check_empty()
        p.maybe_start_download()
        p.mark()
    return p.close(trace.trace_id)


def time_to_downshift_before_rebuffer(result: SessionResult) -> list[float]:
    """Per rebuffer, ms since the most recent downward rung change (if any)."""
    gaps = []
    for start, _ in result.rebuffer_events:
        t = _last_downshift(result, start)
        if t is not None:
            gaps.append(start - t)
    return gaps


def rebuffers_without_downshift(result: SessionResult) -> int:
    return sum(1 for s, _ in result.rebuffer_events if _last_downshift(result, s) is None)


def _last_downshift(result: SessionResult, before: float):
    last = None
    d, times = result.decisions, result.decision_times_ms
    for i in range(1, len(d)):
        if times[i] > before:
            break
        if d[i].rung_index < d[i - 1].rung_index:
            last = times[i]
    return last


def bitrate_rank_at_rebuffer(result: SessionResult, ladder: BitrateLadder | None = None) -> list[int]:
    """Rung of the most recent decision at each rebuffer start."""
    ranks = []
    for start, _ in result.rebuffer_events:
        rank = None
        for d, t in zip(result.decisions, result.decision_times_ms):
            if t > start:
                break
            rank = d.rung_index
        if rank is not None:
            ranks.append(rank)
    return ranks
