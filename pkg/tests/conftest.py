from __future__ import annotations

import numpy as np
import pytest

from leostream.abr import AbrParams, BitrateLadder, Rung
from leostream.link_model import trace_from_rates
from leostream.session import PlayerConfig

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, text = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        previous = _ACCEPTANCE.get(number, ("PASS", text))[0]
        status = "PASS" if report.outcome == "passed" and previous == "PASS" else "FAIL"
        _ACCEPTANCE[number] = (status, text)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, text = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {text}")


def make_ladder(bitrates_kbps=(1000, 3000, 5000, 8000), n_chunks=10, chunk_duration_ms=4000.0,
                vmafs=None, jitter=None) -> BitrateLadder:
    """CBR ladder: chunk size = bitrate x duration, optional per-chunk size jitter."""
    rungs = []
    for i, kbps in enumerate(bitrates_kbps):
        chunks = []
        for c in range(n_chunks):
            j = 1.0 if jitter is None else jitter[c]
            size = int(round(kbps * chunk_duration_ms / 8 * j))
            vmaf = vmafs[i] if vmafs is not None else 40.0 + 60.0 * i / max(1, len(bitrates_kbps) - 1)
            chunks.append((size, float(vmaf)))
        rungs.append(Rung(float(kbps), f"r{i}", chunk_duration_ms, tuple(chunks)))
    return BitrateLadder(tuple(rungs))


def quantized_ladder(rng, chunk_duration_ms=2000.0, n_chunks=20) -> BitrateLadder:
    """Chunk sizes on a 10 kB grid so whole-ms download times fall out of round rates."""
    kbps = (500, 1000, 2000, 4000, 8000)
    jitter = rng.uniform(0.7, 1.3, size=n_chunks)
    rungs = []
    for i, k in enumerate(kbps):
        chunks = tuple((max(10_000, int(round(k * chunk_duration_ms / 8 * j / 10_000)) * 10_000),
                        10.0 + 20.0 * i) for j in jitter)
        rungs.append(Rung(float(k), f"r{i}", chunk_duration_ms, chunks))
    return BitrateLadder(tuple(rungs))


def dense_case(rng):
    """Blocky on/off trace at one rate level, so every event lands on a whole ms."""
    level = float(rng.choice([2.0, 4.0, 8.0, 16.0, 20.0, 40.0]))
    n = int(rng.integers(20, 121))
    rates: list[float] = []
    while len(rates) < n:
        rates += [level] * int(rng.integers(1, 30)) + [0.0] * int(rng.integers(0, 25))
    ladder = quantized_ladder(rng)
    params = AbrParams(smoothing_half_life_ms=float(rng.choice([0, 1000, 5000, 20000])),
                       throughput_discount_frac=float(rng.uniform(0, 0.6)),
                       buffer_discount_threshold_ms=float(rng.uniform(0, 20000)))
    player = PlayerConfig(max_buffer_ms=float(rng.choice([8000, 12000, 20000])),
                          startup_buffer_ms=float(rng.choice([2000, 4000, 6000])))
    return trace_from_rates(rates[:n]), ladder, params, player


@pytest.fixture
def ladder4() -> BitrateLadder:
    return make_ladder()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
