"""Batch experiments: ABR parameter sweeps, congestion A/B runs, and their outputs."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats as sps

from . import link_model
from .abr import SWEEP_RANGES, AbrParams, BitrateLadder, load_ladder, synthetic_ladder
from .congestion import PathModel, parse_variant, simulate_transfer, variant_name
from .link_model import ThroughputTrace, generate_corpus, load_trace
from .qoe import mann_whitney_u, qoe_report
from .session import PlayerConfig, simulate_session

DEFAULT_CORPUS_SIZE = 200
DEFAULT_TRACE_MS = 600_000


class ExperimentError(ValueError):
    """Invalid experiment specification."""


# -- corpus and ladder references ------------------------------------------

def resolve_corpus(ref, seed: int = 0) -> list[ThroughputTrace]:
    """A trace list from a list, a directory/file of trace CSVs, or ``preset:NAME[:N[:MS]]``."""
    if isinstance(ref, (list, tuple)):
        return list(ref)
    text = str(ref)
    if text.startswith("preset:"):
        parts = text.split(":")
        name = parts[1]
        n = int(parts[2]) if len(parts) > 2 else DEFAULT_CORPUS_SIZE
        ms = float(parts[3]) if len(parts) > 3 else DEFAULT_TRACE_MS
        return generate_corpus(name, n, ms, seed=seed)
    path = Path(text)
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
        if not files:
            raise FileNotFoundError(f"no trace files in {path}")
        return [load_trace(f) for f in files]
    if not path.exists():
        raise FileNotFoundError(f"trace file not found: {path}")
    return [load_trace(path)]


def resolve_ladder(ref) -> BitrateLadder:
    """A ladder from an object, a ladder CSV, or ``synthetic[:N_CHUNKS[:SEED]]``."""
    if isinstance(ref, BitrateLadder):
        return ref
    text = str(ref or "synthetic")
    if text.startswith("synthetic"):
        parts = text.split(":")
        n = int(parts[1]) if len(parts) > 1 else 150
        seed = int(parts[2]) if len(parts) > 2 else 0
        return synthetic_ladder(n_chunks=n, seed=seed)
    path = Path(text)
    if not path.exists():
        raise FileNotFoundError(f"ladder file not found: {path}")
    return load_ladder(path)


def _describe(ref) -> str:
    if isinstance(ref, (list, tuple)):
        return f"<{len(ref)} traces>"
    if isinstance(ref, BitrateLadder):
        return f"<ladder {len(ref.rungs)} rungs x {ref.n_chunks} chunks>"
    return str(ref)


# -- sweeps ----------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    swept_param: str
    values: tuple[float, ...]
    held_constant: AbrParams = AbrParams()
    corpus_a: object = "preset:starlink_like"
    corpus_b: object = "preset:terrestrial_like"
    ladder_ref: object = "synthetic"
    seed: int = 0
    player: PlayerConfig = PlayerConfig()
    workers: int = 1

    def __post_init__(self):
        if self.swept_param not in SWEEP_RANGES:
            raise ExperimentError(f"cannot sweep {self.swept_param!r}; choose from {sorted(SWEEP_RANGES)}")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not self.values:
            raise ExperimentError("sweep needs at least one value")
        lo, hi = SWEEP_RANGES[self.swept_param]
        for v in self.values:
            if not lo <= v <= hi:
                raise ExperimentError(f"{self.swept_param}={v:g} outside sweep range [{lo:g}, {hi:g}]")

    def params_for(self, value: float) -> AbrParams:
        return dataclasses.replace(self.held_constant, **{self.swept_param: value})


SWEEP_COLUMNS = (
    "swept_param", "param_value", "corpus", "n_sessions",
    "mean_rebuffers_per_hour", "mean_time_weighted_vmaf", "mean_mqr", "mean_switch_count",
    "mean_play_delay_ms", "rebuffers_subtract_min", "rebuffers_divide_min",
    "vmaf_subtract_min", "switches_subtract_min", "rebuffers_vs_other_p",
)
SESSION_COLUMNS = ("corpus", "param_value", "trace_id", "mqr", "time_weighted_vmaf",
                   "rebuffers_per_hour", "switch_count", "play_delay_ms", "rebuffer_total_ms")


@dataclass
class SweepReport:
    swept_param: str
    rows: list[dict] = field(default_factory=list)
    sessions: list[dict] = field(default_factory=list)
    trends: list[dict] = field(default_factory=list)

    def series(self, corpus: str, column: str) -> list[float]:
        return [r[column] for r in self.rows if r["corpus"] == corpus]

    def values(self, corpus: str) -> list[float]:
        return self.series(corpus, "param_value")


def _session_metrics(args):
    trace, ladder, params, player = args
    result = simulate_session(trace, ladder, params, player)
    return trace.trace_id, qoe_report(result, ladder)


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def run_sweep(spec: SweepSpec) -> SweepReport:
    """Simulate every trace of both corpora under every swept value."""
    ladder = resolve_ladder(spec.ladder_ref)
    corpora = {}
    for label, ref, offset in (("a", spec.corpus_a, 0), ("b", spec.corpus_b, 1)):
        traces = resolve_corpus(ref, seed=spec.seed + offset)
        name = _corpus_name(traces, label)
        if name in corpora:
            name = f"{name}_{label}"
        corpora[name] = traces

    jobs = []
    for name, traces in corpora.items():
        for v in spec.values:
            params = spec.params_for(v)
            for tr in traces:
                jobs.append(((name, v), (tr, ladder, params, spec.player)))
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            outputs = list(pool.map(_session_metrics, [j for _, j in jobs], chunksize=16))
    else:
        outputs = [_session_metrics(j) for _, j in jobs]

    per_cell: dict = {}
    report = SweepReport(spec.swept_param)
    for (key, _), (trace_id, q) in zip(jobs, outputs):
        per_cell.setdefault(key, []).append(q)
        report.sessions.append({"corpus": key[0], "param_value": key[1], "trace_id": trace_id, **q.row()})

    names = list(corpora)
    for name in names:
        rows = []
        for v in spec.values:
            qs = per_cell[(name, v)]
            row = {
                "swept_param": spec.swept_param, "param_value": v, "corpus": name,
                "n_sessions": len(qs),
                "mean_rebuffers_per_hour": _mean([q.rebuffers_per_hour for q in qs]),
                "mean_time_weighted_vmaf": _mean([q.time_weighted_vmaf for q in qs]),
                "mean_mqr": _mean([q.mqr for q in qs]),
                "mean_switch_count": _mean([q.switch_count for q in qs]),
                "mean_play_delay_ms": _mean([q.play_delay_ms for q in qs]),
            }
            others = [n for n in names if n != name]
            if others:
                mine = [q.rebuffers_per_hour for q in qs]
                theirs = [q.rebuffers_per_hour for q in per_cell[(others[0], v)]]
                row["rebuffers_vs_other_p"] = mann_whitney_u(mine, theirs).p_value
            else:
                row["rebuffers_vs_other_p"] = None
            rows.append(row)
        for col, src in (("rebuffers_subtract_min", "mean_rebuffers_per_hour"),
                         ("vmaf_subtract_min", "mean_time_weighted_vmaf"),
                         ("switches_subtract_min", "mean_switch_count")):
            for r, x in zip(rows, _safe_normalize([r[src] for r in rows], "subtract_min")):
                r[col] = x
        for r, x in zip(rows, _safe_normalize([r["mean_rebuffers_per_hour"] for r in rows], "divide_min")):
            r["rebuffers_divide_min"] = x
        report.rows.extend(rows)
        for metric in ("rebuffers_per_hour", "time_weighted_vmaf", "switch_count"):
            xs = [s["param_value"] for s in report.sessions if s["corpus"] == name]
            ys = [s[metric] for s in report.sessions if s["corpus"] == name]
            report.trends.append({"corpus": name, "metric": metric,
                                  **trend(spec.values, [r["mean_" + metric] for r in rows], xs, ys)})
    return report


def _corpus_name(traces, fallback) -> str:
    labels = {t.label for t in traces}
    return labels.pop() if len(labels) == 1 else f"corpus_{fallback}"


def trend(values, means, xs=None, ys=None) -> dict:
    """Least-squares slope of the per-value means, plus a regression p-value on sessions."""
    pts = [(v, m) for v, m in zip(values, means) if m is not None and math.isfinite(m)]
    slope = float(np.polyfit(*zip(*pts), 1)[0]) if len(pts) >= 2 else None
    p = None
    if xs is not None and ys is not None:
        pairs = [(x, y) for x, y in zip(xs, ys) if y is not None and math.isfinite(y)]
        if len({x for x, _ in pairs}) >= 2 and len({y for _, y in pairs}) >= 2:
            p = float(sps.linregress(*zip(*pairs)).pvalue)
    return {"slope": slope, "p_value": p}


def normalize(series: Sequence[float], mode: str = "subtract_min") -> list[float]:
    if len(series) == 0:
        raise ExperimentError("cannot normalize an empty series")
    lo = min(series)
    if mode == "subtract_min":
        return [x - lo for x in series]
    if mode == "divide_min":
        if lo == 0:
            raise ExperimentError("divide_min needs a non-zero minimum")
        return [x / lo for x in series]
    raise ExperimentError(f"unknown normalization {mode!r}")


def _safe_normalize(series, mode):
    if any(x is None for x in series):
        return [None] * len(series)
    try:
        return normalize(series, mode)
    except ExperimentError:
        return [None] * len(series)


# -- congestion-control A/B ----------------------------------------------------

@dataclass(frozen=True)
class CcScenario:
    variant: str = "reno"
    bottleneck: str = "preset:starlink_like"  # preset:NAME or a fixed rate in Mb/s
    base_rtt_ms: float | None = None
    queue_capacity_bytes: int | None = None
    random_loss_rate: float | None = None
    drop_policy: str = "tail_drop"
    bytes_to_send: int = 10_000_000
    max_sim_ms: float = 600_000.0

    def __post_init__(self):
        object.__setattr__(self, "variant", variant_name(parse_variant(self.variant)))

    def same_path(self, other: "CcScenario") -> bool:
        return dataclasses.replace(self, variant="reno") == dataclasses.replace(other, variant="reno")

    def path_for(self, seed: int) -> PathModel:
        """The path seen by one run; preset-driven capacity uses a fresh trace and offset."""
        rng = np.random.default_rng(seed)
        if self.bottleneck.startswith("preset:"):
            name = self.bottleneck.split(":", 1)[1]
            cfg = link_model.preset(name, seed=int(rng.integers(2 ** 31)))
            trace = link_model.generate_synthetic_trace(cfg, DEFAULT_TRACE_MS, trace_id=f"{name}-{seed}",
                                                        label=name if name in link_model.LABELS else "imported")
            offset = float(rng.integers(0, trace.n_buckets)) * trace.bucket_ms
            bottleneck = trace
        else:
            cfg = link_model.SyntheticLinkConfig()
            bottleneck = float(self.bottleneck)
            offset = 0.0
        return PathModel(
            base_rtt_ms=self.base_rtt_ms if self.base_rtt_ms is not None else cfg.base_rtt_ms,
            bottleneck=bottleneck,
            queue_capacity_bytes=(self.queue_capacity_bytes if self.queue_capacity_bytes is not None
                                  else cfg.queue_capacity_bytes),
            random_loss_rate=(self.random_loss_rate if self.random_loss_rate is not None
                              else cfg.random_loss_rate),
            drop_policy=self.drop_policy,
            seed=int(rng.integers(2 ** 31)),
            trace_offset_ms=offset,
        )


AB_RUN_COLUMNS = ("arm", "run", "variant", "goodput_mbps", "retransmit_rate", "rtt_p95_ms",
                  "cwnd_max_bytes", "duration_ms", "complete")
AB_SUMMARY_COLUMNS = ("metric", "control_mean", "treatment_mean", "ratio", "mw_u", "mw_p")
TIMELINE_COLUMNS = ("arm", "run", "t_ms", "cwnd_bytes")


@dataclass
class CcAbReport:
    control: CcScenario
    treatment: CcScenario
    runs: list[dict] = field(default_factory=list)
    summary: list[dict] = field(default_factory=list)
    timelines: list[dict] = field(default_factory=list)

    def metric(self, name: str) -> dict:
        return next(r for r in self.summary if r["metric"] == name)


def _run_transfer(args):
    scenario, seed = args
    return simulate_transfer(scenario.variant, scenario.path_for(seed), scenario.bytes_to_send,
                             scenario.max_sim_ms)


def run_cc_ab(control: CcScenario, treatment: CcScenario, n_runs: int, seed: int = 0,
              workers: int = 1) -> CcAbReport:
    """Run each arm ``n_runs`` times on independently drawn paths and compare them.

    Each run's path seed comes from (seed, arm, run), the way an A/B test
    assigns different users to each arm.
    """
    if n_runs < 2:
        raise ExperimentError("n_runs must be at least 2")
    if not control.same_path(treatment):
        raise ExperimentError("A/B scenarios may differ only in variant")
    jobs = []
    for arm, sc in ((0, control), (1, treatment)):
        for run, ss in enumerate(np.random.SeedSequence([seed, arm]).spawn(n_runs)):
            jobs.append((arm, run, (sc, int(ss.generate_state(1)[0]))))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_transfer, [j for *_, j in jobs]))
    else:
        results = [_run_transfer(j) for *_, j in jobs]

    report = CcAbReport(control, treatment)
    by_arm = {0: [], 1: []}
    for (arm, run, (sc, _)), res in zip(jobs, results):
        by_arm[arm].append(res)
        report.runs.append({"arm": "control" if arm == 0 else "treatment", "run": run,
                            "variant": sc.variant, "goodput_mbps": res.goodput_mbps,
                            "retransmit_rate": res.retransmit_rate, "rtt_p95_ms": res.rtt_p95_ms,
                            "cwnd_max_bytes": res.cwnd_max_bytes, "duration_ms": res.duration_ms,
                            "complete": int(res.complete)})
        report.timelines.extend({"arm": report.runs[-1]["arm"], "run": run, "t_ms": t, "cwnd_bytes": c}
                                for t, c in res.cwnd_timeline)
    for metric in ("goodput_mbps", "retransmit_rate", "rtt_p95_ms", "cwnd_max_bytes"):
        a = [getattr(r, metric) for r in by_arm[0]]
        b = [getattr(r, metric) for r in by_arm[1]]
        ma, mb = float(np.mean(a)), float(np.mean(b))
        test = mann_whitney_u(b, a)
        report.summary.append({"metric": metric, "control_mean": ma, "treatment_mean": mb,
                               "ratio": mb / ma if ma else None, "mw_u": test.statistic,
                               "mw_p": test.p_value})
    return report


# -- parameter search ------------------------------------------------------

def tune(corpus_ref, ladder_ref="synthetic", n_trials: int = 50, seed: int = 0,
         player: PlayerConfig = PlayerConfig()) -> list[dict]:
    """Random search over the three knobs, ranked by summed ranks of rebuffers and VMAF.

    Lower mean rebuffers/hour and higher mean time-weighted VMAF are better;
    the first row of the result is the best trial.
    """
    traces = resolve_corpus(corpus_ref, seed=seed)
    ladder = resolve_ladder(ladder_ref)
    rng = np.random.default_rng(seed)
    trials = []
    for i in range(n_trials):
        params = AbrParams(
            smoothing_half_life_ms=float(rng.uniform(*SWEEP_RANGES["smoothing_half_life_ms"])),
            throughput_discount_frac=float(rng.uniform(*SWEEP_RANGES["throughput_discount_frac"])),
            buffer_discount_threshold_ms=float(rng.uniform(*SWEEP_RANGES["buffer_discount_threshold_ms"])),
        )
        qs = [_session_metrics((t, ladder, params, player))[1] for t in traces]
        trials.append({"trial": i, **{k: getattr(params, k) for k in SWEEP_RANGES},
                       "mean_rebuffers_per_hour": _mean([q.rebuffers_per_hour for q in qs]),
                       "mean_time_weighted_vmaf": _mean([q.time_weighted_vmaf for q in qs])})
    rb = sps.rankdata([t["mean_rebuffers_per_hour"] for t in trials])
    vm = sps.rankdata([-(t["mean_time_weighted_vmaf"] or 0.0) for t in trials])
    for t, a, b in zip(trials, rb, vm):
        t["rank_sum"] = float(a + b)
    return sorted(trials, key=lambda t: (t["rank_sum"], t["trial"]))


# -- output ----------------------------------------------------------------

def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "nan" if math.isnan(x) else repr(float(x))
    return str(x)


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    """Inverse of :func:`rows_to_csv` for numeric cells; empty cells become None."""
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        rec = {}
        for k, v in row.items():
            if v == "":
                rec[k] = None
                continue
            try:
                rec[k] = int(v)
            except ValueError:
                try:
                    rec[k] = float(v)
                except ValueError:
                    rec[k] = v
        out.append(rec)
    return out


PLOT_METRICS = {
    "rebuffers_per_hour": "mean_rebuffers_per_hour",
    "rebuffers_subtract_min": "rebuffers_subtract_min",
    "rebuffers_divide_min": "rebuffers_divide_min",
    "time_weighted_vmaf": "mean_time_weighted_vmaf",
    "vmaf_subtract_min": "vmaf_subtract_min",
    "switch_count": "mean_switch_count",
}
PLOT_COLUMNS = ("metric", "x", "y", "corpus")


def plotdata_rows(report: SweepReport) -> list[dict]:
    rows = []
    for metric, col in PLOT_METRICS.items():
        for r in report.rows:
            rows.append({"metric": metric, "x": r["param_value"], "y": r.get(col), "corpus": r["corpus"]})
    return rows


def emit(report, path, fmt: str = "csv") -> list[Path]:
    """Write ``report`` under directory ``path``; returns the files written."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    if isinstance(report, SweepReport):
        if fmt == "csv":
            files["sweep.csv"] = rows_to_csv(report.rows, SWEEP_COLUMNS)
            files["sessions.csv"] = rows_to_csv(report.sessions, SESSION_COLUMNS)
            files["trends.csv"] = rows_to_csv(report.trends, ("corpus", "metric", "slope", "p_value"))
        elif fmt == "plotdata":
            files["plotdata.csv"] = rows_to_csv(plotdata_rows(report), PLOT_COLUMNS)
        else:
            raise ExperimentError(f"unknown format {fmt!r}")
    elif isinstance(report, CcAbReport):
        if fmt == "csv":
            files["ab_runs.csv"] = rows_to_csv(report.runs, AB_RUN_COLUMNS)
            files["ab_summary.csv"] = rows_to_csv(report.summary, AB_SUMMARY_COLUMNS)
        elif fmt == "plotdata":
            rows = [{"metric": m, "x": r["run"], "y": r[m], "corpus": r["arm"]}
                    for m in ("goodput_mbps", "retransmit_rate", "rtt_p95_ms") for r in report.runs]
            files["plotdata.csv"] = rows_to_csv(rows, PLOT_COLUMNS)
        elif fmt == "timeline":
            files["cwnd_timeline.csv"] = rows_to_csv(report.timelines, TIMELINE_COLUMNS)
        else:
            raise ExperimentError(f"unknown format {fmt!r}")
    else:
        raise ExperimentError(f"cannot emit {type(report).__name__}")
    written = []
    for name, text in files.items():
        p = out / name
        p.write_text(text, encoding="utf-8")
        written.append(p)
    return written


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, command: str, inputs: dict, seed, files: Sequence[Path]) -> Path:
    out = Path(out_dir)
    manifest = {
        "command": command,
        "inputs": {k: _describe(v) if not isinstance(v, (int, float, str, type(None))) else v
                   for k, v in sorted(inputs.items())},
        "seed": seed,
        "outputs": {Path(f).relative_to(out).as_posix(): sha256_file(f)
                    for f in sorted(files, key=lambda p: Path(p).as_posix())},
    }
    p = out / "manifest.json"
    p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return p
