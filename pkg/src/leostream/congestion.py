"""New Reno and MulTCP(N) congestion control over a simulated bottleneck.

The controller is a set of pure state transitions (``on_ack``, ``on_loss``,
``on_timeout``) over an immutable :class:`CcState`. MulTCP(N) behaves like N
Reno flows sharing one connection: growth is N times Reno's, and a loss
shrinks the window by one flow's half-share, a factor of (2N-1)/(2N).

:func:`simulate_transfer` drives the controller with a segment-level
discrete-event loop: FIFO bottleneck queue, random loss, propagation delay,
cumulative ACKs, triple-dupack fast retransmit and an RFC 6298 retransmission
timer. Recovery uses a SACK scoreboard by default; ``sack=False`` falls back
to New Reno partial-ACK recovery.
"""

from __future__ import annotations

import dataclasses
import heapq
import math
import random
import re
from collections import deque
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .link_model import ThroughputTrace

SLOW_START = "slow_start"
CONGESTION_AVOIDANCE = "congestion_avoidance"
FAST_RECOVERY = "fast_recovery"
PHASES = (SLOW_START, CONGESTION_AVOIDANCE, FAST_RECOVERY)

MSS = 1460
INITIAL_WINDOW_SEGMENTS = 10
RTO_INITIAL_MS = 1000.0
RTO_MIN_MS = 200.0
RTO_MAX_MS = 60_000.0
DEFAULT_RWND_BYTES = 16 * 1024 * 1024
# RFC 3465 byte counting limit: one ACK credits at most this many segments of growth
ABC_LIMIT_SEGMENTS = 2


@dataclass(frozen=True)
class CcState:
    cwnd_bytes: float
    ssthresh_bytes: float
    phase: str = SLOW_START
    mss_bytes: int = MSS
    n_virtual_flows: int = 1

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.n_virtual_flows < 1:
            raise ValueError("n_virtual_flows must be >= 1")
        if self.cwnd_bytes < self.mss_bytes or self.ssthresh_bytes <= 0:
            raise ValueError("cwnd must be >= 1 mss and ssthresh > 0")

    @property
    def decrease_factor(self) -> Fraction:
        """(2N-1)/(2N) as an exact fraction, so exact-arithmetic states stay exact."""
        return Fraction(2 * self.n_virtual_flows - 1, 2 * self.n_virtual_flows)


def initial_state(n_virtual_flows: int = 1, mss_bytes: int = MSS,
                  ssthresh_bytes: float = DEFAULT_RWND_BYTES) -> CcState:
    return CcState(float(INITIAL_WINDOW_SEGMENTS * mss_bytes), float(ssthresh_bytes), SLOW_START,
                   mss_bytes, n_virtual_flows)


def on_ack(state: CcState, newly_acked_bytes: float) -> CcState:
    if newly_acked_bytes <= 0:
        raise ValueError("newly_acked_bytes must be positive")
    if state.phase == FAST_RECOVERY:
        raise ValueError("on_ack is not defined during fast recovery")
    n = state.n_virtual_flows
    if state.phase == SLOW_START:
        cwnd = state.cwnd_bytes + n * newly_acked_bytes
    else:
        cwnd = state.cwnd_bytes + n * state.mss_bytes * newly_acked_bytes / state.cwnd_bytes
    phase = CONGESTION_AVOIDANCE if cwnd >= state.ssthresh_bytes else state.phase
    return dataclasses.replace(state, cwnd_bytes=cwnd, phase=phase)


def _decrease(x, n: int):
    # exact for Fraction windows, plain float arithmetic otherwise
    if isinstance(x, Fraction):
        return x * Fraction(2 * n - 1, 2 * n)
    return x * (2 * n - 1) / (2 * n)


def on_loss(state: CcState) -> CcState:
    cwnd = max(state.mss_bytes, _decrease(state.cwnd_bytes, state.n_virtual_flows))
    return dataclasses.replace(state, cwnd_bytes=cwnd, ssthresh_bytes=cwnd, phase=FAST_RECOVERY)


def on_timeout(state: CcState) -> CcState:
    # RFC 5681 floors ssthresh at two segments
    ssthresh = max(2 * state.mss_bytes, _decrease(state.cwnd_bytes, state.n_virtual_flows))
    return dataclasses.replace(state, cwnd_bytes=state.mss_bytes, ssthresh_bytes=ssthresh,
                               phase=SLOW_START)


def exit_recovery(state: CcState) -> CcState:
    """Full ACK after fast recovery: deflate to ssthresh, resume avoidance."""
    cwnd = max(state.mss_bytes, state.ssthresh_bytes)
    return dataclasses.replace(state, cwnd_bytes=cwnd, phase=CONGESTION_AVOIDANCE)


def parse_variant(variant) -> int:
    """Emulated-flow count for ``"reno"``, ``"multcp(N)"``, ``"multcp:N"`` or an int."""
    if isinstance(variant, int):
        n = variant
    else:
        text = str(variant).strip().lower()
        if text in ("reno", "newreno"):
            return 1
        m = re.fullmatch(r"multcp(?:\((\d+)\)|:(\d+)|(\d+))?", text)
        if not m:
            raise ValueError(f"unknown congestion variant {variant!r}")
        n = int(next((g for g in m.groups() if g), 3))
    if n < 1:
        raise ValueError("emulated flow count must be >= 1")
    return n


def variant_name(n: int) -> str:
    return "reno" if n == 1 else f"multcp({n})"


@dataclass(frozen=True)
class PathModel:
    base_rtt_ms: float
    bottleneck: float | ThroughputTrace
    queue_capacity_bytes: int = 250_000
    random_loss_rate: float = 0.0
    drop_policy: str = "tail_drop"
    early_drop_target_ms: float = 5.0
    seed: int = 0
    trace_offset_ms: float = 0.0

    def __post_init__(self):
        if self.base_rtt_ms <= 0:
            raise ValueError("base_rtt_ms must be > 0")
        if self.queue_capacity_bytes < 2 * MSS:
            raise ValueError("queue_capacity_bytes must hold at least two segments")
        if not 0 <= self.random_loss_rate < 1:
            raise ValueError("random_loss_rate must be in [0, 1)")
        if self.drop_policy not in ("tail_drop", "early_drop"):
            raise ValueError(f"unknown drop policy {self.drop_policy!r}")
        if not isinstance(self.bottleneck, ThroughputTrace) and not self.bottleneck > 0:
            raise ValueError("fixed bottleneck rate must be > 0")

    def mean_capacity_mbps(self) -> float:
        if isinstance(self.bottleneck, ThroughputTrace):
            return self.bottleneck.mean_mbps()
        return float(self.bottleneck)


class _Bottleneck:
    """Serialization at a fixed or trace-driven (zero-order hold) rate."""

    def __init__(self, path: PathModel):
        if isinstance(path.bottleneck, ThroughputTrace):
            self.rates = (path.bottleneck.rates_mbps() * 125.0).tolist()
            self.bucket_ms = path.bottleneck.bucket_ms
            self.offset = path.trace_offset_ms
            self.fixed = None
            if not any(self.rates):
                self.fixed = 0.0
        else:
            self.fixed = float(path.bottleneck) * 125.0

    def rate_at(self, t: float) -> float:
        if self.fixed is not None:
            return self.fixed
        k = int((t + self.offset) // self.bucket_ms)
        return self.rates[k % len(self.rates)]

    def finish(self, t: float, nbytes: float) -> float:
        if self.fixed is not None:
            return t + nbytes / self.fixed if self.fixed > 0 else math.inf
        bms, rates, n = self.bucket_ms, self.rates, len(self.rates)
        t += self.offset
        while True:
            k = int(t // bms)
            end = (k + 1) * bms
            r = rates[k % n]
            if r > 0:
                need = nbytes / r
                if t + need <= end:
                    return t + need - self.offset
                nbytes -= r * (end - t)
            t = end


@dataclass(frozen=True)
class TransferResult:
    goodput_mbps: float
    retransmit_rate: float
    rtt_p95_ms: float
    cwnd_max_bytes: float
    cwnd_timeline: tuple[tuple[float, float], ...]
    duration_ms: float
    complete: bool = True
    bytes_acked: int = 0
    segments_sent: int = 0
    loss_events: int = 0
    timeouts: int = 0
    n_virtual_flows: int = 1

    def row(self) -> dict:
        return {"variant": variant_name(self.n_virtual_flows), "goodput_mbps": self.goodput_mbps,
                "retransmit_rate": self.retransmit_rate, "rtt_p95_ms": self.rtt_p95_ms,
                "cwnd_max_bytes": self.cwnd_max_bytes, "duration_ms": self.duration_ms,
                "complete": int(self.complete), "bytes_acked": self.bytes_acked,
                "segments_sent": self.segments_sent, "loss_events": self.loss_events,
                "timeouts": self.timeouts}


_ACK, _RTO = 0, 1


class _Transfer:
    """Sender, bottleneck and receiver state for one bulk transfer."""

    def __init__(self, n_flows, path, bytes_to_send, mss, rwnd, sack, sample_ms):
        self.mss = mss
        self.rwnd = rwnd
        self.sack = sack
        self.sample_ms = sample_ms
        self.total = math.ceil(bytes_to_send / mss)
        self.rng = random.Random(path.seed)
        self.link = _Bottleneck(path)
        self.loss_p = path.random_loss_rate
        self.qcap = path.queue_capacity_bytes
        self.early = path.drop_policy == "early_drop"
        self.target = path.early_drop_target_ms
        self.rtt_base = path.base_rtt_ms

        self.state = initial_state(n_flows, mss, rwnd)
        self.una = self.nxt = self.high = 0
        self.dupacks = 0
        self.recover = -1
        self.inflation = 0.0
        self.partial_acks = 0
        self.sacked = set()
        self.hisack = -1
        self.holes_out = set()
        self.hole_ptr = 0
        self.srtt = self.rttvar = None
        self.rto = RTO_INITIAL_MS
        self.timer_gen = 0

        self.queue = deque()
        self.queued = 0
        self.last_dep = 0.0
        self.expected = 0
        self.ooo = set()

        self.events = []
        self.order = 0
        self.rtt_samples = []
        self.timeline = [(0.0, self.state.cwnd_bytes)]
        self.cwnd_max = self.state.cwnd_bytes
        self.sent = self.retx = self.losses = self.timeouts = 0

    # -- network -----------------------------------------------------------
    def transmit(self, seg, t, is_retx):
        self.sent += 1
        if is_retx:
            self.retx += 1
        if self.loss_p and self.rng.random() < self.loss_p:
            return
        queue = self.queue
        while queue and queue[0][0] <= t:
            self.queued -= queue.popleft()[1]
        if self.queued + self.mss > self.qcap:
            return
        if self.early and self.last_dep > t:
            delay = self.last_dep - t
            if delay > self.target:
                if delay >= 4 * self.target or self.rng.random() < (delay - self.target) / (3 * self.target):
                    return
        dep = self.link.finish(max(t, self.last_dep), self.mss)
        if dep == math.inf:
            return
        self.last_dep = dep
        queue.append((dep, self.mss))
        self.queued += self.mss
        # FIFO with fixed propagation delay: the receiver sees packets in enqueue order
        if seg == self.expected:
            self.expected += 1
            while self.expected in self.ooo:
                self.ooo.discard(self.expected)
                self.expected += 1
        elif seg > self.expected:
            self.ooo.add(seg)
        self.order += 1
        heapq.heappush(self.events, (dep + self.rtt_base, self.order, _ACK, self.expected, t, seg))

    def arm_timer(self, t):
        self.timer_gen += 1
        self.order += 1
        heapq.heappush(self.events, (t + self.rto, self.order, _RTO, self.timer_gen, 0.0, 0))

    # -- sending -----------------------------------------------------------
    def try_send(self, t):
        if self.sack and self.state.phase == FAST_RECOVERY:
            self._send_recovery(t)
            return
        window = min(self.state.cwnd_bytes + self.inflation, self.rwnd)
        started = self.nxt == self.una
        mss = self.mss
        while self.nxt < self.total and (self.nxt - self.una + 1) * mss <= window + 1e-9:
            if self.nxt in self.sacked:
                self.nxt += 1
                continue
            self.transmit(self.nxt, t, self.nxt < self.high)
            self.nxt += 1
            if self.nxt > self.high:
                self.high = self.nxt
        if started and self.nxt > self.una:
            self.arm_timer(t)

    def _send_recovery(self, t):
        """Scoreboard recovery: holes below the highest SACK are lost; keep the pipe at cwnd."""
        limit = min(self.state.cwnd_bytes, self.rwnd) / self.mss
        while True:
            pipe = max(0, self.nxt - 1 - self.hisack) + len(self.holes_out)
            if pipe + 1 > limit + 1e-9:
                return
            p = max(self.hole_ptr, self.una)
            while p < self.hisack and (p in self.sacked or p in self.holes_out):
                p += 1
            self.hole_ptr = p
            if p < self.hisack:
                self.transmit(p, t, True)
                self.holes_out.add(p)
                self.hole_ptr = p + 1
            elif self.nxt < self.total:
                if self.nxt not in self.sacked:
                    self.transmit(self.nxt, t, self.nxt < self.high)
                self.nxt += 1
                if self.nxt > self.high:
                    self.high = self.nxt
            else:
                return

    # -- events ------------------------------------------------------------
    def note(self, t, force=False):
        c = self.state.cwnd_bytes + self.inflation
        if c > self.cwnd_max:
            self.cwnd_max = c
        if force or t - self.timeline[-1][0] >= self.sample_ms:
            self.timeline.append((t, c))

    def on_rto(self, t):
        self.timeouts += 1
        self.state = on_timeout(self.state)
        self.partial_acks = 0
        self.recover = self.high - 1
        self.inflation = 0.0
        self.dupacks = 0
        self.holes_out.clear()
        self.nxt = self.una
        self.rto = min(RTO_MAX_MS, self.rto * 2)
        self.note(t, force=True)
        self.try_send(t)

    def on_ack_event(self, t, ackno, echo, seg):
        """Returns True once every segment is acknowledged."""
        sample = t - echo
        self.rtt_samples.append(sample)
        if self.srtt is None:
            self.srtt, self.rttvar = sample, sample / 2
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - sample)
            self.srtt = 0.875 * self.srtt + 0.125 * sample
        self.rto = min(RTO_MAX_MS, max(RTO_MIN_MS, self.srtt + 4 * self.rttvar))
        if self.sack and seg >= ackno:
            self.sacked.add(seg)
            if seg > self.hisack:
                self.hisack = seg

        state = self.state
        if ackno > self.una:
            newly = (ackno - self.una) * self.mss
            for s in range(self.una, ackno):
                self.sacked.discard(s)
                self.holes_out.discard(s)
            if state.phase == FAST_RECOVERY:
                if ackno > self.recover:
                    self.state = exit_recovery(state)
                    self.inflation = 0.0
                    self.partial_acks = 0
                    self.una = ackno
                elif self.sack:
                    self.una = ackno
                else:
                    self.inflation = max(0.0, self.inflation - newly + self.mss)
                    self.una = ackno
                    self.transmit(self.una, t, True)
                    self.partial_acks += 1
            else:
                # a stretch ACK (e.g. after a retransmission fills a hole) grows cwnd by at most L
                self.state = on_ack(state, min(newly, ABC_LIMIT_SEGMENTS * self.mss))
                if self.state.cwnd_bytes > self.rwnd:
                    self.state = dataclasses.replace(self.state, cwnd_bytes=float(self.rwnd))
                self.una = ackno
            if self.nxt < self.una:
                self.nxt = self.una
            if self.high < self.una:
                self.high = self.una
            self.dupacks = 0
            if self.una >= self.total:
                self.note(t, force=True)
                return True
            # impatient New Reno: only the first partial ACK restarts the timer
            if self.partial_acks <= 1:
                self.arm_timer(t)
        elif ackno == self.una and self.nxt > self.una:
            self.dupacks += 1
            if state.phase == FAST_RECOVERY:
                if not self.sack:
                    self.inflation += self.mss
            elif self.dupacks == 3 and self.una > self.recover:
                self.losses += 1
                self.state = on_loss(state)
                self.recover = self.high - 1
                self.partial_acks = 0
                if self.sack:
                    self.holes_out = {self.una}
                    self.hole_ptr = self.una + 1
                else:
                    self.inflation = 3.0 * self.mss
                self.transmit(self.una, t, True)
                self.arm_timer(t)
                self.note(t, force=True)
        self.note(t)
        self.try_send(t)
        return False


def simulate_transfer(variant, path: PathModel, bytes_to_send: int, max_sim_ms: float = 600_000.0,
                      mss_bytes: int = MSS, rwnd_bytes: int = DEFAULT_RWND_BYTES,
                      sample_ms: float = 10.0, sack: bool = True) -> TransferResult:
    """Send ``bytes_to_send`` over ``path`` and report goodput, retransmits and RTT.

    Deterministic for a given ``path.seed``. If ``max_sim_ms`` runs out first
    the result has ``complete=False`` and goodput counts acknowledged bytes.
    ``sack=False`` recovers with New Reno partial ACKs (one hole per RTT).
    """
    n_flows = parse_variant(variant)
    if bytes_to_send <= 0:
        raise ValueError("bytes_to_send must be positive")
    tx = _Transfer(n_flows, path, bytes_to_send, mss_bytes, rwnd_bytes, sack, sample_ms)
    tx.try_send(0.0)
    now = 0.0
    done_at = None
    events = tx.events
    while events:
        now, _, kind, val, echo, seg = heapq.heappop(events)
        if now > max_sim_ms:
            now = max_sim_ms
            break
        if kind == _RTO:
            if val == tx.timer_gen and tx.una < tx.total:
                tx.on_rto(now)
        elif tx.on_ack_event(now, val, echo, seg):
            done_at = now
            break

    complete = done_at is not None
    elapsed = done_at if complete else now
    acked = bytes_to_send if complete else min(bytes_to_send, tx.una * mss_bytes)
    goodput = acked * 8 / (elapsed * 1000.0) if elapsed > 0 else 0.0
    p95 = float(np.percentile(tx.rtt_samples, 95)) if tx.rtt_samples else math.nan
    return TransferResult(
        goodput_mbps=goodput,
        retransmit_rate=tx.retx / tx.sent if tx.sent else 0.0,
        rtt_p95_ms=p95,
        cwnd_max_bytes=tx.cwnd_max,
        cwnd_timeline=tuple(tx.timeline),
        duration_ms=elapsed,
        complete=complete,
        bytes_acked=acked,
        segments_sent=tx.sent,
        loss_events=tx.losses,
        timeouts=tx.timeouts,
        n_virtual_flows=n_flows,
    )
