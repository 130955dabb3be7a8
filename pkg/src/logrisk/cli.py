"""Command-line entry point.

Exit codes: 0 when every requested stage completed, 1 when a stage errored
(the report is still written), 2 for invalid configuration or arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__, config
from .pipeline import MANIFEST_SUFFIX, STAGES, TRUTH_SUFFIX, PipelineConfig, Report, emit_report, run_pipeline
from .synthgen import (
    LogGenConfig,
    RegGenConfig,
    fragile_robust_pair,
    gen_event_log,
    gen_regression_data,
    save_manifest,
    write_event_log,
    write_regression_data,
)

STAGES_FOR = {
    "ingest": ("ingest",),
    "unicity": ("ingest", "unicity"),
    "features": ("ingest", "features"),
    "regress": ("ingest", "features", "regression"),
    "amip": ("ingest", "features", "regression", "amip"),
    "pipeline": STAGES,
}

HELP = {
    "ingest": "parse and validate an event log",
    "unicity": "estimate unicity over generalization levels and observation counts",
    "features": "compute habit entropy and timestamp features",
    "regress": "select and fit the habit-entropy regression",
    "amip": "fit the regression and search for influential removal sets",
    "pipeline": "run every stage and write the full report",
}


def _float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _count_range(text: str) -> tuple[int, int]:
    parts = [int(x) for x in text.split(",")]
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected N or LO,HI")
    return parts[0], parts[1]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="logrisk", description="Re-identification risk and opt-out sensitivity for event logs.")
    parser.add_argument("--version", action="version", version=f"logrisk {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in HELP.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("input_path", nargs="?", help="event log (same as --input)")
        p.add_argument("--config", help="TOML configuration file (see `logrisk config`)")
        if name in ("regress", "amip"):
            p.add_argument("--table", help="prepared CSV (first column = row ids) used instead of log-derived features")
            p.add_argument("--response", default="y", help="response column of --table (default: y)")
        config.add_flags(p)

    sub.add_parser("config", help="print a complete configuration file with every key and its default")

    synth = sub.add_parser("synth", help="generate synthetic data with ground truth").add_subparsers(dest="synth_command", required=True)
    log = synth.add_parser("log", help="synthetic event log plus manifest (<out>.manifest.json)")
    log.add_argument("--out", required=True)
    log.add_argument("--seed", type=int, default=0)
    log.add_argument("--n-actors", type=int, default=200)
    log.add_argument("--events-per-actor", type=_count_range, default=(20, 60), metavar="LO,HI")
    log.add_argument("--period-days", type=int, default=28)
    log.add_argument("--mode", choices=("self_paced", "scheduled"), default="self_paced")
    log.add_argument("--slots-per-actor", type=int, default=2)
    log.add_argument("--twin-pairs", type=int, default=0)
    log.add_argument("--tz-offset-min", type=int, default=0)
    log.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    log.add_argument("--ts-format", choices=("iso8601", "epoch"), default="iso8601")

    reg = synth.add_parser("reg", help="synthetic regression table plus ground truth (<out>.truth.json)")
    reg.add_argument("--out", required=True)
    reg.add_argument("--seed", type=int, default=0)
    reg.add_argument("--preset", choices=("fragile", "robust"), help="the documented fragile or robust design")
    reg.add_argument("--n", type=int, default=100)
    reg.add_argument("--p", type=int, default=3)
    reg.add_argument("--beta", type=_float_tuple, help="comma-separated, intercept first")
    reg.add_argument("--sigma", type=float, default=1.0)
    reg.add_argument("--planted-count", type=int, default=0)
    reg.add_argument("--planted-leverage", type=float, default=10.0)
    reg.add_argument("--planted-residual", type=float, default=-20.0)
    return parser


def _synth(ns: argparse.Namespace) -> int:
    out = Path(ns.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if ns.synth_command == "log":
        cfg = LogGenConfig(
            n_actors=ns.n_actors,
            events_per_actor=ns.events_per_actor,
            period_days=ns.period_days,
            mode=ns.mode,
            slots_per_actor=ns.slots_per_actor,
            twin_pairs=ns.twin_pairs,
            seed=ns.seed,
            tz_offset_min=ns.tz_offset_min,
        )
        d, manifest = gen_event_log(cfg)
        write_event_log(d, out, ns.format, ns.ts_format)
        manifest["file"] = {"format": ns.format, "ts_format": ns.ts_format}
        save_manifest(manifest, str(out) + MANIFEST_SUFFIX)
        print(f"wrote {d.n_events} events for {d.n_actors} actors to {out}")
        return 0
    if ns.preset:
        fragile, robust = fragile_robust_pair(ns.seed)
        cfg = fragile if ns.preset == "fragile" else robust
    else:
        cfg = RegGenConfig(
            n=ns.n,
            p=ns.p,
            beta=ns.beta,
            sigma=ns.sigma,
            planted_count=ns.planted_count,
            planted_leverage=ns.planted_leverage,
            planted_residual=ns.planted_residual,
            seed=ns.seed,
        )
    dm, truth = gen_regression_data(cfg)
    write_regression_data(dm, out)
    save_manifest(truth.to_dict(), str(out) + TRUTH_SUFFIX)
    print(f"wrote {dm.n} rows with {dm.p} regressors to {out}")
    return 0


def _print_summary(report: Report) -> None:
    data = report.data
    for stage in STAGES:
        section = data.get(stage, {})
        status = section.get("status", "not_requested")
        if status == "not_requested":
            continue
        detail = ""
        if status == "error":
            detail = f": {section['error']['type']}: {section['error']['message']}"
        elif status == "skipped":
            detail = f": {section['reason']}"
        print(f"{stage:<11} {status}{detail}")
    for w in data.get("warnings", []):
        print(f"warning: {w}", file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(ns.verbose, 2), format="%(levelname)s %(name)s: %(message)s")

    if ns.command == "config":
        print(config.reference_toml())
        return 0
    if ns.command == "synth":
        return _synth(ns)

    try:
        raw = config.load(ns.config)
        raw = config.apply_flags(raw, ns)
        if ns.input_path:
            raw = config.merge(raw, {"input": {"path": ns.input_path}})
        cfg = PipelineConfig.from_dict(raw)
    except (config.ConfigError, OSError) as exc:
        print(f"logrisk: configuration error: {exc}", file=sys.stderr)
        return 2

    table = getattr(ns, "table", None)
    report = run_pipeline(cfg, STAGES_FOR[ns.command], table=table, response=getattr(ns, "response", "y"))
    try:
        written = emit_report(report, cfg.out_dir, cfg.formats)
    except OSError as exc:
        print(f"logrisk: cannot write report: {exc}", file=sys.stderr)
        return 2
    _print_summary(report)
    print(f"report: {', '.join(str(p) for p in written)}")
    if ns.command == "ingest" and report.data["ingest"].get("status") == "ok":
        print(json.dumps({k: v for k, v in report.data["ingest"].items() if k != "status"}, sort_keys=True))
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
