"""Command-line entry point: ``leostream <verb> --out DIR [options]``.

Every option can also come from an INI file given with ``--config``; the
``[abr]``, ``[link]`` and ``[player]`` sections use the dataclass field names
and ``[run]`` holds verb options (spelled as on the command line, without
dashes). Flags given on the command line win over the file.

Exit status: 0 success, 1 invalid input, 2 file-system trouble.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
from pathlib import Path

from . import harness, link_model
from .abr import SWEEP_RANGES, AbrParams, save_ladder
from .harness import CcScenario, SweepSpec
from .link_model import SyntheticLinkConfig, save_link_config, save_trace
from .qoe import QoEReport, ks_one_sided, mann_whitney_u, qoe_report, quantile_ratio
from .session import PlayerConfig, simulate_session

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


# option name -> (type, default); None defaults are filled by dataclass defaults
_ABR_FIELDS = {f.name: float for f in dataclasses.fields(AbrParams)}
_LINK_FIELDS = {f.name: (int if f.type == "int" else float)
                for f in dataclasses.fields(SyntheticLinkConfig) if f.name != "seed"}
_PLAYER_FIELDS = {"max_buffer_ms": float, "startup_buffer_ms": float, "throughput_source": str}


def _add_group(p, title, fields):
    g = p.add_argument_group(title)
    for name, typ in fields.items():
        g.add_argument(f"--{name}", type=typ, default=None)


def _common(p, seed=True):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="INI file with [run], [abr], [link], [player] sections")
    if seed:
        p.add_argument("--seed", type=int, default=None)


RUN_DEFAULTS = {
    "gen-corpus": {"preset": "starlink_like", "n_traces": 200, "duration_ms": 600_000.0, "seed": 0,
                   "ladder_chunks": 0},
    "simulate": {"traces": None, "ladder": "synthetic", "seed": 0},
    "sweep": {"swept_param": "smoothing_half_life_ms", "values": None,
              "corpus_a": "preset:starlink_like", "corpus_b": "preset:terrestrial_like",
              "ladder": "synthetic", "seed": 0, "workers": 1, "format": "both"},
    "cc-ab": {"variant_a": "reno", "variant_b": "multcp(3)", "bottleneck": "preset:starlink_like",
              "drop_policy": "tail_drop", "bytes_to_send": 10_000_000, "n_runs": 50,
              "max_sim_ms": 600_000.0, "seed": 0, "workers": 1, "cwnd_timeline": False},
    "stats": {"a": None, "b": None, "column": "rebuffers_per_hour", "test": "mann_whitney",
              "alternative": None, "quantiles": None, "method": "auto"},
    "report": {"sweep_dir": None, "normalize": "subtract_min", "metric": "mean_rebuffers_per_hour"},
    "tune": {"corpus": "preset:starlink_like:50", "ladder": "synthetic", "n_trials": 50, "seed": 0},
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="leostream", description="Trace-driven LEO video streaming experiments.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="generate a synthetic trace corpus")
    _common(p)
    p.add_argument("--preset", choices=sorted(link_model.PRESETS))
    p.add_argument("--n_traces", type=int)
    p.add_argument("--duration_ms", type=float)
    p.add_argument("--ladder_chunks", type=int, help="also write a synthetic ladder with this many chunks")
    _add_group(p, "link model", _LINK_FIELDS)

    p = sub.add_parser("simulate", help="simulate sessions over traces")
    _common(p)
    p.add_argument("--traces", help="trace file, directory, or preset:NAME[:N[:MS]]")
    p.add_argument("--ladder", help="ladder CSV or synthetic[:N_CHUNKS[:SEED]]")
    _add_group(p, "ABR", _ABR_FIELDS)
    _add_group(p, "player", _PLAYER_FIELDS)

    p = sub.add_parser("sweep", help="sweep one ABR parameter over two corpora")
    _common(p)
    p.add_argument("--swept_param", choices=sorted(SWEEP_RANGES))
    p.add_argument("--values", help="comma-separated values")
    p.add_argument("--corpus_a")
    p.add_argument("--corpus_b")
    p.add_argument("--ladder")
    p.add_argument("--workers", type=int)
    p.add_argument("--format", choices=("csv", "plotdata", "both"))
    _add_group(p, "ABR (held constant)", _ABR_FIELDS)
    _add_group(p, "player", _PLAYER_FIELDS)

    p = sub.add_parser("cc-ab", help="congestion-control A/B test")
    _common(p)
    p.add_argument("--variant_a")
    p.add_argument("--variant_b")
    p.add_argument("--bottleneck", help="preset:NAME or a fixed rate in Mb/s")
    p.add_argument("--base_rtt_ms", type=float)
    p.add_argument("--queue_capacity_bytes", type=int)
    p.add_argument("--random_loss_rate", type=float)
    p.add_argument("--drop_policy", choices=("tail_drop", "early_drop"))
    p.add_argument("--bytes_to_send", type=int)
    p.add_argument("--max_sim_ms", type=float)
    p.add_argument("--n_runs", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--cwnd_timeline", action="store_const", const=True, default=None,
                   help="also write every run's sampled congestion window")

    p = sub.add_parser("stats", help="compare one column of two metric CSVs")
    _common(p, seed=False)
    p.add_argument("--a")
    p.add_argument("--b")
    p.add_argument("--column")
    p.add_argument("--test", choices=("mann_whitney", "ks_one_sided"))
    p.add_argument("--alternative", choices=("two-sided", "greater", "less"))
    p.add_argument("--method", choices=("auto", "exact", "asymptotic"))
    p.add_argument("--quantiles", help="comma-separated probabilities for a quantile-ratio curve")

    p = sub.add_parser("report", help="normalize a sweep's aggregates for plotting")
    _common(p, seed=False)
    p.add_argument("--sweep_dir", help="directory holding sweep.csv")
    p.add_argument("--normalize", choices=("subtract_min", "divide_min"))
    p.add_argument("--metric", help="sweep.csv column to normalize")

    p = sub.add_parser("tune", help="random search over the three ABR knobs")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--ladder")
    p.add_argument("--n_trials", type=int)
    _add_group(p, "player", _PLAYER_FIELDS)
    return parser


def _load_config(path):
    if path is None:
        return {}
    if not Path(path).is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path, encoding="utf-8")
    return {s: dict(parser[s]) for s in parser.sections()}


def _resolve(args, verb: str, cfg: dict) -> dict:
    """Merge defaults < config [run] < flags for the verb's own options."""
    out = dict(RUN_DEFAULTS[verb])
    for k, v in cfg.get("run", {}).items():
        if k not in out and not hasattr(args, k):
            raise UsageError(f"unknown [run] key {k!r} for {verb}")
        out[k] = v
    for k in list(out) + [k for k in vars(args) if k not in out]:
        v = getattr(args, k, None)
        if v is not None and k not in ("out", "config", "verb") and k not in _ABR_FIELDS \
                and k not in _LINK_FIELDS and k not in _PLAYER_FIELDS:
            out[k] = v
    for k in ("n_traces", "seed", "workers", "n_runs", "bytes_to_send", "n_trials", "ladder_chunks",
              "queue_capacity_bytes"):
        if out.get(k) is not None:
            out[k] = int(out[k])
    if isinstance(out.get("cwnd_timeline"), str):
        out["cwnd_timeline"] = configparser.ConfigParser.BOOLEAN_STATES.get(out["cwnd_timeline"].lower())
        if out["cwnd_timeline"] is None:
            raise UsageError("cwnd_timeline must be a boolean")
    for k in ("duration_ms", "max_sim_ms", "base_rtt_ms", "random_loss_rate"):
        if out.get(k) is not None:
            out[k] = float(out[k])
    return out


def _section(args, cfg, name, fields) -> dict:
    vals = {}
    for k, raw in cfg.get(name, {}).items():
        if k not in fields:
            raise UsageError(f"unknown [{name}] key {k!r}")
        vals[k] = fields[k](raw)
    for k in fields:
        v = getattr(args, k, None)
        if v is not None:
            vals[k] = v
    return vals


def _abr(args, cfg) -> AbrParams:
    return AbrParams(**_section(args, cfg, "abr", _ABR_FIELDS))


def _player(args, cfg) -> PlayerConfig:
    return PlayerConfig(**_section(args, cfg, "player", _PLAYER_FIELDS))


def _input_hashes(*refs) -> dict:
    hashes = {}
    for ref in refs:
        if ref is None or str(ref).startswith(("preset:", "synthetic")):
            continue
        p = Path(str(ref))
        files = sorted(p.glob("*.csv")) if p.is_dir() else [p]
        for f in files:
            if f.is_file():
                hashes[f.as_posix()] = harness.sha256_file(f)
    return hashes


def _finish(out: Path, verb: str, opts: dict, files, extra_inputs=None, seed=None) -> None:
    inputs = {k: v for k, v in opts.items() if not isinstance(v, (dict, list))}
    inputs.update(extra_inputs or {})
    path = harness.write_manifest(out, verb, inputs, seed, list(files))
    hashes = _input_hashes(*[v for k, v in opts.items()
                             if k in ("traces", "ladder", "corpus_a", "corpus_b", "corpus", "a", "b",
                                      "sweep_dir")])
    if hashes:
        data = json.loads(path.read_text(encoding="utf-8"))
        data["input_hashes"] = hashes
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- verbs -----------------------------------------------------------------

def cmd_gen_corpus(args, cfg, out: Path) -> None:
    o = _resolve(args, "gen-corpus", cfg)
    overrides = _section(args, cfg, "link", _LINK_FIELDS)
    traces = link_model.generate_corpus(o["preset"], o["n_traces"], o["duration_ms"],
                                        seed=o["seed"], **overrides)
    tdir = out / "traces"
    tdir.mkdir(parents=True, exist_ok=True)
    files = []
    for tr in traces:
        p = tdir / f"{tr.trace_id}.csv"
        save_trace(tr, p)
        files.append(p)
    link_path = out / "link.ini"
    save_link_config(link_model.preset(o["preset"], **overrides), link_path)
    files.append(link_path)
    if o["ladder_chunks"]:
        lp = out / "ladder.csv"
        save_ladder(harness.resolve_ladder(f"synthetic:{o['ladder_chunks']}:{o['seed']}"), lp)
        files.append(lp)
    _finish(out, "gen-corpus", o, files, {"link": json.dumps(overrides, sort_keys=True)}, o["seed"])


METRIC_COLUMNS = ("trace_id",) + tuple(f.name for f in dataclasses.fields(QoEReport))


def cmd_simulate(args, cfg, out: Path) -> None:
    o = _resolve(args, "simulate", cfg)
    if not o["traces"]:
        raise UsageError("--traces is required")
    params, player = _abr(args, cfg), _player(args, cfg)
    traces = harness.resolve_corpus(o["traces"], seed=o["seed"])
    ladder = harness.resolve_ladder(o["ladder"])
    out.mkdir(parents=True, exist_ok=True)
    rows, lines = [], []
    for tr in traces:
        res = simulate_session(tr, ladder, params, player)
        lines.append(res.to_json())
        rows.append({"trace_id": tr.trace_id, **qoe_report(res, ladder).row()})
    sessions = out / "sessions.jsonl"
    sessions.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    metrics = out / "metrics.csv"
    metrics.write_text(harness.rows_to_csv(rows, METRIC_COLUMNS), encoding="utf-8")
    _finish(out, "simulate", o, [sessions, metrics],
            {"abr": json.dumps(dataclasses.asdict(params), sort_keys=True),
             "player": json.dumps(dataclasses.asdict(player), sort_keys=True)}, o["seed"])


def cmd_sweep(args, cfg, out: Path) -> None:
    o = _resolve(args, "sweep", cfg)
    if not o["values"]:
        raise UsageError("--values is required")
    held = _abr(args, cfg)
    spec = SweepSpec(o["swept_param"], tuple(_floats(o["values"])), held, o["corpus_a"], o["corpus_b"],
                     o["ladder"], o["seed"], _player(args, cfg), o["workers"])
    report = harness.run_sweep(spec)
    files = []
    if o["format"] in ("csv", "both"):
        files += harness.emit(report, out, "csv")
    if o["format"] in ("plotdata", "both"):
        files += harness.emit(report, out, "plotdata")
    opts = {k: v for k, v in o.items() if k != "workers"}
    _finish(out, "sweep", opts, files, {"held_constant": json.dumps(dataclasses.asdict(held), sort_keys=True)},
            o["seed"])


def cmd_cc_ab(args, cfg, out: Path) -> None:
    o = _resolve(args, "cc-ab", cfg)
    common = {k: o.get(k) for k in ("bottleneck", "base_rtt_ms", "queue_capacity_bytes",
                                    "random_loss_rate", "drop_policy", "bytes_to_send", "max_sim_ms")}
    control = CcScenario(o["variant_a"], **common)
    treatment = CcScenario(o["variant_b"], **common)
    report = harness.run_cc_ab(control, treatment, o["n_runs"], o["seed"], o["workers"])
    files = harness.emit(report, out, "csv") + harness.emit(report, out, "plotdata")
    if o["cwnd_timeline"]:
        files += harness.emit(report, out, "timeline")
    opts = {k: v for k, v in o.items() if k != "workers"}
    _finish(out, "cc-ab", opts, files, seed=o["seed"])


def _read_column(path, column):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"metrics file not found: {p}")
    rows = harness.parse_csv(p.read_text(encoding="utf-8"))
    if rows and column not in rows[0]:
        raise UsageError(f"{p}: no column {column!r}")
    vals = [r[column] for r in rows if r[column] is not None]
    if not vals:
        raise UsageError(f"{p}: column {column!r} has no values")
    return [float(v) for v in vals]


def cmd_stats(args, cfg, out: Path) -> None:
    o = _resolve(args, "stats", cfg)
    if not o["a"] or not o["b"]:
        raise UsageError("--a and --b are required")
    a, b = _read_column(o["a"], o["column"]), _read_column(o["b"], o["column"])
    if o["test"] == "mann_whitney":
        res = mann_whitney_u(a, b, o["alternative"] or "two-sided", o["method"])
    else:
        res = ks_one_sided(a, b, o["alternative"] or "greater")
    out.mkdir(parents=True, exist_ok=True)
    files = []
    p = out / "stats.json"
    p.write_text(json.dumps({"column": o["column"], **res.row()}, indent=2, sort_keys=True) + "\n",
                 encoding="utf-8")
    files.append(p)
    if o["quantiles"]:
        curve = quantile_ratio(a, b, _floats(o["quantiles"]))
        q = out / "quantile_ratio.csv"
        q.write_text(harness.rows_to_csv([{"quantile": x, "ratio": y} for x, y in
                                          zip(curve.quantiles, curve.ratios)], ("quantile", "ratio")),
                     encoding="utf-8")
        files.append(q)
    _finish(out, "stats", o, files)


def cmd_report(args, cfg, out: Path) -> None:
    o = _resolve(args, "report", cfg)
    if not o["sweep_dir"]:
        raise UsageError("--sweep_dir is required")
    src = Path(o["sweep_dir"]) / "sweep.csv"
    if not src.is_file():
        raise FileNotFoundError(f"sweep results not found: {src}")
    rows = harness.parse_csv(src.read_text(encoding="utf-8"))
    if rows and o["metric"] not in rows[0]:
        raise UsageError(f"{src}: no column {o['metric']!r}")
    out_rows = []
    for corpus in dict.fromkeys(r["corpus"] for r in rows):
        sel = [r for r in rows if r["corpus"] == corpus]
        normed = harness.normalize([r[o["metric"]] for r in sel], o["normalize"])
        for r, y in zip(sel, normed):
            out_rows.append({"metric": f"{o['metric']}:{o['normalize']}", "x": r["param_value"],
                             "y": y, "corpus": corpus})
    out.mkdir(parents=True, exist_ok=True)
    p = out / "report.csv"
    p.write_text(harness.rows_to_csv(out_rows, harness.PLOT_COLUMNS), encoding="utf-8")
    _finish(out, "report", o, [p])


TUNE_COLUMNS = ("trial", *SWEEP_RANGES, "mean_rebuffers_per_hour", "mean_time_weighted_vmaf", "rank_sum")


def cmd_tune(args, cfg, out: Path) -> None:
    o = _resolve(args, "tune", cfg)
    rows = harness.tune(o["corpus"], o["ladder"], o["n_trials"], o["seed"], _player(args, cfg))
    out.mkdir(parents=True, exist_ok=True)
    p = out / "tune.csv"
    p.write_text(harness.rows_to_csv(rows, TUNE_COLUMNS), encoding="utf-8")
    _finish(out, "tune", o, [p], seed=o["seed"])


COMMANDS = {"gen-corpus": cmd_gen_corpus, "simulate": cmd_simulate, "sweep": cmd_sweep,
            "cc-ab": cmd_cc_ab, "stats": cmd_stats, "report": cmd_report, "tune": cmd_tune}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _load_config(args.config)
        COMMANDS[args.verb](args, cfg, Path(args.out))
    except OSError as exc:
        print(f"leostream: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, IndexError) as exc:
        print(f"leostream: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
