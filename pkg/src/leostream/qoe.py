"""QoE metrics per session and the rank/distribution tests used to compare them."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .abr import BitrateLadder
from .session import SessionResult

EXACT_MAX_TOTAL = 12


@dataclass(frozen=True)
class QoEReport:
    mqr: float | None
    time_weighted_vmaf: float | None
    rebuffers_per_hour: float
    switch_count: int
    play_delay_ms: float | None
    rebuffer_total_ms: float

    def row(self) -> dict:
        return {"mqr": self.mqr, "time_weighted_vmaf": self.time_weighted_vmaf,
                "rebuffers_per_hour": self.rebuffers_per_hour, "switch_count": self.switch_count,
                "play_delay_ms": self.play_delay_ms, "rebuffer_total_ms": self.rebuffer_total_ms}


def played_chunk_durations(result: SessionResult) -> list[float]:
    """Play time of each decided chunk; playback is in chunk order, stalls excluded."""
    dur = result.chunk_duration_ms
    left = result.played_ms
    out = []
    for _ in result.decisions:
        take = min(dur, max(0.0, left))
        out.append(take)
        left -= take
    return out


def _weighted_vmaf(result: SessionResult, ladder: BitrateLadder):
    num = den = ceiling = 0.0
    for d, w in zip(result.decisions, played_chunk_durations(result)):
        if w <= 0:
            break
        num += w * ladder.vmaf(d.rung_index, d.chunk_index)
        ceiling += w * ladder.max_vmaf(d.chunk_index)
        den += w
    return num, den, ceiling


def time_weighted_vmaf(result: SessionResult, ladder: BitrateLadder) -> float | None:
    num, den, _ = _weighted_vmaf(result, ladder)
    return num / den if den > 0 else None


def max_quality_ratio(result: SessionResult, ladder: BitrateLadder) -> float | None:
    """Played-time-weighted VMAF over the best VMAF the ladder offered for the same chunks.

    ``None`` when nothing was played.
    """
    num, den, ceiling = _weighted_vmaf(result, ladder)
    if den <= 0 or ceiling <= 0:
        return None
    return num / ceiling


def rebuffers_per_hour(result: SessionResult) -> float:
    n = len(result.rebuffer_events)
    if n == 0:
        return 0.0
    if result.played_ms <= 0:
        return math.inf
    return n / (result.played_ms / 3.6e6)


def qoe_report(result: SessionResult, ladder: BitrateLadder) -> QoEReport:
    return QoEReport(
        mqr=max_quality_ratio(result, ladder),
        time_weighted_vmaf=time_weighted_vmaf(result, ladder),
        rebuffers_per_hour=rebuffers_per_hour(result),
        switch_count=result.switch_count,
        play_delay_ms=result.play_delay_ms,
        rebuffer_total_ms=result.rebuffer_total_ms,
    )


@dataclass(frozen=True)
class QuantileRatioCurve:
    quantiles: tuple[float, ...]
    ratios: tuple[float | None, ...]


def empirical_quantile(values: Sequence[float], q: float) -> float:
    """Linear interpolation between order statistics (numpy's default)."""
    return float(np.quantile(np.asarray(values, dtype=float), q))


def quantile_ratio(a: Sequence[float], b: Sequence[float], qs: Sequence[float]) -> QuantileRatioCurve:
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both samples must be non-empty")
    qs = tuple(float(q) for q in qs)
    if any(not 0 < q < 1 for q in qs) or any(y <= x for x, y in zip(qs, qs[1:])):
        raise ValueError("quantiles must be strictly increasing within (0, 1)")
    qa = np.quantile(np.asarray(a, dtype=float), qs)
    qb = np.quantile(np.asarray(b, dtype=float), qs)
    ratios = tuple(float(x / y) if y != 0 else None for x, y in zip(qa, qb))
    return QuantileRatioCurve(qs, ratios)


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    method: str
    n1: int = 0
    n2: int = 0
    alternative: str = "two-sided"

    __test__ = False  # keep pytest from collecting this class

    def row(self) -> dict:
        return {"method": self.method, "alternative": self.alternative, "statistic": self.statistic,
                "p_value": self.p_value, "n1": self.n1, "n2": self.n2}


def midranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=values.__getitem__)
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        r = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = r
        i = j + 1
    return ranks


def _u_from_ranks(ranks_a: Sequence[float], n1: int) -> float:
    return sum(ranks_a) - n1 * (n1 + 1) / 2


def mann_whitney_u(a: Sequence[float], b: Sequence[float], alternative: str = "two-sided",
                   method: str = "auto") -> TestResult:
    """U statistic of ``a`` (midranks for ties) with an exact or normal-approximation p.

    ``method="auto"`` enumerates every assignment of the pooled ranks when
    ``len(a) + len(b) <= 12`` and otherwise uses the tie-corrected normal
    approximation with continuity correction. ``alternative="greater"`` tests
    whether ``a`` tends to exceed ``b``.
    """
    a, b = list(map(float, a)), list(map(float, b))
    n1, n2 = len(a), len(b)
    if not n1 or not n2:
        raise ValueError("both samples must be non-empty")
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    ranks = midranks(a + b)
    u = _u_from_ranks(ranks[:n1], n1)
    if method == "auto":
        method = "exact" if n1 + n2 <= EXACT_MAX_TOTAL else "asymptotic"
    if method == "exact":
        p = _exact_p(ranks, n1, u, alternative)
    elif method == "asymptotic":
        p = _normal_p(ranks, n1, n2, u, alternative)
    else:
        raise ValueError(f"unknown method {method!r}")
    return TestResult(u, min(1.0, max(0.0, p)), "mann_whitney", n1, n2, alternative)


def _exact_p(ranks, n1, u, alternative) -> float:
    n = len(ranks)
    centre = n1 * (n - n1) / 2
    tol = 1e-9
    hits = total = 0
    for idx in itertools.combinations(range(n), n1):
        v = _u_from_ranks([ranks[i] for i in idx], n1)
        total += 1
        if alternative == "two-sided":
            hits += abs(v - centre) >= abs(u - centre) - tol
        elif alternative == "greater":
            hits += v >= u - tol
        else:
            hits += v <= u + tol
    return hits / total


def _normal_p(ranks, n1, n2, u, alternative) -> float:
    n = n1 + n2
    ties = {}
    for r in ranks:
        ties[r] = ties.get(r, 0) + 1
    tie_term = sum(t ** 3 - t for t in ties.values())
    var = n1 * n2 / 12 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return 1.0
    sd = math.sqrt(var)
    centre = n1 * n2 / 2
    if alternative == "two-sided":
        z = (abs(u - centre) - 0.5) / sd
        return min(1.0, 2 * _norm_sf(max(z, 0.0)))
    if alternative == "greater":
        return _norm_sf((u - centre - 0.5) / sd)
    return _norm_sf((centre - u - 0.5) / sd)


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2))


def ecdf_difference(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """(sup(F_a - F_b), sup(F_b - F_a)) over the pooled sample points."""
    xa, xb = np.sort(np.asarray(a, float)), np.sort(np.asarray(b, float))
    grid = np.concatenate([xa, xb])
    fa = np.searchsorted(xa, grid, side="right") / len(xa)
    fb = np.searchsorted(xb, grid, side="right") / len(xb)
    return max(0.0, float((fa - fb).max())), max(0.0, float((fb - fa).max()))


def ks_one_sided(a: Sequence[float], b: Sequence[float], alternative: str = "greater") -> TestResult:
    """One-sided two-sample KS with the asymptotic p-value exp(-2 m n D^2 / (m + n)).

    ``"greater"`` uses D+ = sup(F_a - F_b), evidence that ``a`` sits below
    ``b``; ``"less"`` uses D- = sup(F_b - F_a).
    """
    m, n = len(a), len(b)
    if not m or not n:
        raise ValueError("both samples must be non-empty")
    d_plus, d_minus = ecdf_difference(a, b)
    if alternative == "greater":
        d = d_plus
    elif alternative == "less":
        d = d_minus
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    p = math.exp(-2.0 * m * n * d * d / (m + n))
    return TestResult(d, min(1.0, p), "ks_one_sided", m, n, alternative)
