"""End-to-end pipeline: ingest, unicity sweep, features, model selection, AMIP.

Every stage records its status in the report.  A failed stage does not stop
stages that do not depend on it; dependants are marked skipped with the
reason.  The canonical JSON excludes wall-clock timings and execution-only
settings so reruns are byte-identical.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd

from . import __version__, config
from .amip import TARGETS, analyze_all
from .habitfeat import SessionParams, TimeWindowPartition, event_counts, extract_features, habit_table, regression_frame
from .logmodel import Dataset, GeneralizationLevel, QISpec, Schema, parse_events
from .regress import CRITERIA, DesignMatrix, fit_ols, select_model
from .synthgen import manifest_consistent, twin_ceiling
from .unicity import TABLE_COLUMNS, UnicityConfig, estimate_unicity

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = ("ingest", "unicity", "features", "regression", "amip")
DEPENDS = {"ingest": (), "unicity": ("ingest",), "features": ("ingest",), "regression": ("features",), "amip": ("regression",)}
FORMATS = ("json", "markdown", "csv")
MANIFEST_SUFFIX = ".manifest.json"
TRUTH_SUFFIX = ".truth.json"

ASSUMPTIONS = (
    "unicity: the attacker knows the target is in the log and draws observations uniformly from the target's distinct tuples",
    "unicity: the interval is a percentile bootstrap over the pooled per-target indicators of all seeds",
    "features: time-of-day windows and dates use the configured fixed UTC offset",
    "regression: AMIP thresholds use heteroskedasticity-robust (HC0) standard errors and a normal critical value",
    "amip: removal sets come from a first-order approximation and are confirmed by refitting",
)


@dataclass(frozen=True)
class PipelineConfig:
    """A validated configuration plus the typed objects each stage needs."""

    raw: dict
    schema: Schema
    input_format: str
    qispec: QISpec
    levels: tuple[GeneralizationLevel, ...]
    unicity: UnicityConfig
    session: SessionParams
    partition: TimeWindowPartition
    max_terms: int
    criterion: str
    select: bool
    alpha: float
    alpha_cap: float
    include_ids: str
    out_dir: Path
    formats: tuple[str, ...]

    @property
    def input_path(self) -> str:
        return self.raw["input"]["path"]

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        raw = config.merge(config.defaults(), raw)
        try:
            inp, qi, un, fe, rg, am, out = (raw[s] for s in config.SECTIONS)
            schema = Schema(inp["actor_col"], inp["ts_col"], inp["ts_format"], tuple(inp["attr_cols"]))
            missing = [a for a in qi["attributes"] if a not in inp["attr_cols"]]
            if missing:
                raise ValueError(f"qi.attributes {missing} must also be listed in input.attr_cols")
            levels = []
            for name in qi["levels"]:
                lv = GeneralizationLevel.parse(name)
                if lv.name == "date" and "@" not in name:
                    lv = GeneralizationLevel("date", qi["date_tz_offset_min"])
                levels.append(lv)
            if not levels:
                raise ValueError("qi.levels must not be empty")
            if len({str(lv) for lv in levels}) != len(levels):
                raise ValueError("qi.levels contains duplicates")
            ucfg = UnicityConfig(
                epsilons=tuple(un["epsilons"]),
                sample_size=un["sample_size"],
                seeds=UnicityConfig.seeds_from_root(raw["seed"], un["n_seeds"]),
                bootstrap_reps=un["bootstrap_reps"],
                short_trajectory_policy=un["short_trajectory_policy"],
                threads=max(1, raw["threads"]),
            )
            if un["n_seeds"] < 1:
                raise ValueError("unicity.n_seeds must be >= 1")
            session = SessionParams(fe["timeout_s"], fe["tail_cap_s"], fe["tz_offset_min"], fe["duration_mode"])
            if rg["max_terms"] < 1:
                raise ValueError("regression.max_terms must be >= 1")
            if rg["criterion"] not in CRITERIA:
                raise ValueError(f"regression.criterion must be one of {CRITERIA}")
            if not 0 < rg["alpha"] < 1:
                raise ValueError("regression.alpha must lie in (0, 1)")
            if not 0 < am["alpha_cap"] <= 1:
                raise ValueError("amip.alpha_cap must lie in (0, 1]")
            bad = [f for f in out["formats"] if f not in FORMATS]
            if bad:
                raise ValueError(f"unknown output formats {bad}; choose from {FORMATS}")
        except ValueError as exc:
            if isinstance(exc, config.ConfigError):
                raise
            raise config.ConfigError(str(exc)) from exc
        return cls(
            raw=raw,
            schema=schema,
            input_format=inp["format"],
            qispec=QISpec(attributes=tuple(qi["attributes"])),
            levels=tuple(levels),
            unicity=ucfg,
            session=session,
            partition=TimeWindowPartition(tz_offset_min=fe["tz_offset_min"]),
            max_terms=rg["max_terms"],
            criterion=rg["criterion"],
            select=rg["select"],
            alpha=rg["alpha"],
            alpha_cap=am["alpha_cap"],
            include_ids=am["include_ids"],
            out_dir=Path(out["dir"]),
            formats=tuple(out["formats"]),
        )

    @classmethod
    def load(cls, path: str | None = None, overrides: dict | None = None) -> "PipelineConfig":
        raw = config.load(path)
        if overrides:
            raw = config.merge(raw, overrides)
        return cls.from_dict(raw)


@dataclass
class Report:
    """Canonical report content plus non-canonical timings and artifact tables."""

    data: dict
    timings: dict[str, float] = field(default_factory=dict)
    tables: dict[str, pd.DataFrame] = field(default_factory=dict)
    sidecars: dict[str, dict] = field(default_factory=dict)

    @property
    def failed_stages(self) -> list[str]:
        return [s for s in STAGES if self.data.get(s, {}).get("status") == "error"]

    @property
    def exit_code(self) -> int:
        return 1 if self.failed_stages else 0

    def to_json(self) -> str:
        return canonical_json(self.data)


def _clean(v: Any) -> Any:
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_clean(x) for x in v.tolist()]
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def canonical_json(data: dict) -> str:
    return json.dumps(_clean(data), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def _summary(values: pd.Series) -> dict:
    v = values.to_numpy(dtype=float)
    return {
        "mean": float(v.mean()),
        "sd": float(v.std(ddof=1)) if len(v) > 1 else None,
        "min": float(v.min()),
        "median": float(np.median(v)),
        "max": float(v.max()),
    }


def _load_sidecar(path: str, suffix: str) -> dict | None:
    p = Path(str(path) + suffix)
    if not path or not p.is_file():
        return None
    with open(p, encoding="utf-8") as fh:
        return json.load(fh)


class _Run:
    """Mutable state threaded through the stages of one pipeline run."""

    def __init__(self, cfg: PipelineConfig, stages: Sequence[str]) -> None:
        self.cfg = cfg
        self.stages = tuple(stages)
        self.report = Report(
            {
                "schema_version": SCHEMA_VERSION,
                "tool": {"name": "logrisk", "version": __version__},
                "config": config.echo(cfg.raw),
                "assumptions": list(ASSUMPTIONS),
                "warnings": [],
            }
        )
        self.dataset: Dataset | None = None
        self.manifest: dict | None = None
        self.frame: pd.DataFrame | None = None
        self.candidates: list[str] = []
        self.response = "habit_entropy"
        self.fit = None
        self.dm: DesignMatrix | None = None
        self.synthetic = False

    def warn(self, msg: str) -> None:
        self.report.data["warnings"].append(msg)

    def run(self, name: str, fn: Callable[[], dict], deps: Sequence[str] | None = None) -> None:
        data = self.report.data
        if name not in self.stages:
            data[name] = {"status": "not_requested"}
            return
        blocked = [dep for dep in (DEPENDS[name] if deps is None else deps) if data.get(dep, {}).get("status") != "ok"]
        if blocked:
            data[name] = {"status": "skipped", "reason": f"depends on {', '.join(blocked)}, which did not complete"}
            return
        t0 = time.perf_counter()
        try:
            section = fn()
        except Exception as exc:  # recorded, never raised: the report is the error channel
            logger.debug("stage %s failed", name, exc_info=True)
            data[name] = {"status": "error", "error": {"type": type(exc).__name__, "message": str(exc)}}
        else:
            data[name] = {"status": "ok", **section}
        self.report.timings[name] = time.perf_counter() - t0

    # -- stages ------------------------------------------------------------------

    def ingest(self) -> dict:
        cfg = self.cfg
        if not cfg.input_path:
            raise ValueError("no input path given (input.path / --input)")
        d = parse_events(cfg.input_path, cfg.schema, cfg.input_format, skip_bad_rows=cfg.raw["input"]["skip_bad_rows"])
        self.dataset = d
        if d.rows_skipped:
            self.warn(f"ingest: skipped {d.rows_skipped} malformed rows of {d.rows_read}")
        out = {
            "n_actors": d.n_actors,
            "n_events": d.n_events,
            "rows_read": d.rows_read,
            "rows_skipped": d.rows_skipped,
            "attributes": list(d.attribute_names),
        }
        self.manifest = _load_sidecar(cfg.input_path, MANIFEST_SUFFIX)
        self.synthetic = self.manifest is not None
        if self.manifest is not None:
            ok = manifest_consistent(d, self.manifest)
            out["manifest"] = {"found": True, "consistent": ok, "twin_pairs": len(self.manifest.get("twins", []))}
            if not ok:
                self.warn("ingest: the log does not match its synthetic manifest")
        return out

    def unicity(self) -> dict:
        cfg = self.cfg
        assert self.dataset is not None
        cfg.qispec.validate(self.dataset)
        est = estimate_unicity(self.dataset, cfg.qispec, cfg.levels, cfg.unicity)
        for w in est.warnings:
            self.warn(f"unicity: {w}")
        self.report.tables["unicity"] = est.table()
        out = est.to_dict()
        out.pop("warnings")
        out["columns"] = list(TABLE_COLUMNS)
        if self.manifest is not None:
            out["twin_ceiling"] = twin_ceiling(self.dataset.n_actors, len(self.manifest.get("twins", [])))
        return out

    def features(self) -> dict:
        cfg = self.cfg
        assert self.dataset is not None
        habit = habit_table(self.dataset, cfg.partition, cfg.session)
        fm = extract_features(self.dataset, cfg.session)
        frame, counts = regression_frame(fm, habit, event_counts(self.dataset))
        self.frame, self.candidates = frame, fm.columns
        sidecar = fm.sidecar()
        sidecar.update({"response": self.response, "regression_rows": counts, "partition": cfg.partition.describe()})
        self.report.tables["features"] = frame
        self.report.sidecars["features"] = sidecar
        for c, k in sidecar["imputed_counts"].items():
            if k:
                self.warn(f"features: {c} imputed with the global median for {k} actors")
        return {
            "n_actors": int(len(fm.frame)),
            "n_rows": counts["n_rows"],
            "dropped_no_events": fm.n_dropped,
            "dropped_zero_time": counts["dropped_zero_time"],
            "dropped_single_event": counts["dropped_single_event"],
            "imputed_counts": sidecar["imputed_counts"],
            "response": {self.response: _summary(frame[self.response])} if len(frame) else {},
            "summary": {c: _summary(frame[c]) for c in self.candidates} if len(frame) else {},
        }

    def regression(self) -> dict:
        cfg = self.cfg
        assert self.frame is not None
        frame, y = self.frame, self.frame[self.response]
        if cfg.select:
            sel, fit, dm = select_model(frame[self.candidates], y, cfg.max_terms, cfg.criterion, alpha=cfg.alpha)
            selection = sel.to_dict()
        else:
            dm = DesignMatrix.from_frame(frame, self.candidates, y)
            fit = fit_ols(dm, alpha=cfg.alpha)
            selection = {"chosen": list(self.candidates), "method": "all_columns"}
        self.fit, self.dm = fit, dm
        return {"response": self.response, "candidates": list(self.candidates), "selection": selection, "fit": fit.to_dict()}

    def amip(self) -> dict:
        cfg = self.cfg
        assert self.fit is not None and self.dm is not None
        analysis = analyze_all(self.fit, self.dm, alpha_cap=cfg.alpha_cap)
        include = cfg.include_ids == "true" or (cfg.include_ids == "auto" and self.synthetic)
        results = [r.to_dict(include_ids=include) for r in analysis.results]
        hist = analysis.histogram()
        self.report.tables["alpha_hist"] = pd.DataFrame(hist, columns=["target", "bin_low", "bin_high", "count", "confirmed"])
        self.report.tables["amip"] = pd.DataFrame([{k: v for k, v in r.items() if k != "removal_ids"} for r in results])
        return {"removal_ids_included": include, "results": results, "summary": analysis.summary(), "histogram": hist}


def _read_table(path: str, response: str) -> tuple[pd.DataFrame, list[str]]:
    frame = pd.read_csv(path, index_col=0, float_precision="round_trip")  # bit-exact with the %.17g writer
    frame.index = frame.index.astype(str)
    if response not in frame.columns:
        raise ValueError(f"response column {response!r} not in {path}")
    candidates = [c for c in frame.columns if c != response]
    if not candidates:
        raise ValueError("the table needs at least one regressor column")
    return frame, candidates


def run_pipeline(
    cfg: PipelineConfig,
    stages: Sequence[str] = STAGES,
    *,
    table: str | None = None,
    response: str = "y",
) -> Report:
    """Run the requested stages in order and return the report.

    With ``table`` the regression and AMIP stages read a prepared CSV (first
    column = row ids) instead of features derived from the event log.
    """
    run = _Run(cfg, stages)
    if table is not None:
        def load_table() -> dict:
            run.frame, run.candidates = _read_table(table, response)
            run.response = response
            run.synthetic = _load_sidecar(table, TRUTH_SUFFIX) is not None
            return {"source": "table", "n_rows": int(len(run.frame)), "columns": list(run.frame.columns)}

        run.stages = ("features",) + tuple(s for s in stages if s in ("regression", "amip"))
        run.run("ingest", run.ingest)
        run.run("unicity", run.unicity)
        run.run("features", load_table, deps=())
        run.run("regression", run.regression)
        run.run("amip", run.amip)
        return run.report
    for name in STAGES:
        run.run(name, getattr(run, name))
    return run.report


# -- emission --------------------------------------------------------------------


def _num(v: Any) -> str:
    """Lossless text for a JSON scalar: floats use the shortest round-trip repr."""
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _md_table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(_num(c) for c in row) + " |" for row in rows]
    return lines + [""]


def _md_status(name: str, section: dict) -> list[str]:
    status = section.get("status", "not_requested")
    if status == "ok":
        return []
    if status == "error":
        return [f"Status: error ({section['error']['type']}: {section['error']['message']})", ""]
    if status == "skipped":
        return [f"Status: skipped ({section['reason']})", ""]
    return ["Status: not requested", ""]


def render_markdown(data: dict) -> str:
    """Human digest of a report dict (as loaded from the canonical JSON)."""
    out = [f"# logrisk report (schema {data['schema_version']}, {data['tool']['name']} {data['tool']['version']})", ""]
    out += ["## Stages", ""]
    out += _md_table(["stage", "status"], [[s, data.get(s, {}).get("status", "not_requested")] for s in STAGES])

    ing = data.get("ingest", {})
    out += ["## Ingest", ""] + _md_status("ingest", ing)
    if ing.get("status") == "ok":
        out += _md_table(["n_actors", "n_events", "rows_read", "rows_skipped"], [[ing["n_actors"], ing["n_events"], ing["rows_read"], ing["rows_skipped"]]])

    un = data.get("unicity", {})
    out += ["## Unicity", ""] + _md_status("unicity", un)
    if un.get("status") == "ok":
        cols = un["columns"]
        out += _md_table(cols, [[r[c] for c in cols] for r in un["rows"]])
        if "twin_ceiling" in un:
            out += [f"Twin ceiling from the manifest: {_num(un['twin_ceiling'])}", ""]

    fe = data.get("features", {})
    out += ["## Features", ""] + _md_status("features", fe)
    if fe.get("status") == "ok" and "summary" in fe:
        out += [f"Rows in the regression frame: {fe['n_rows']}", ""]
        stats = ["mean", "sd", "min", "median", "max"]
        rows = [[name] + [s[k] for k in stats] for name, s in {**fe["response"], **fe["summary"]}.items()]
        out += _md_table(["feature"] + stats, rows)

    rg = data.get("regression", {})
    out += ["## Regression", ""] + _md_status("regression", rg)
    if rg.get("status") == "ok":
        fit = rg["fit"]
        out += [f"Response: {rg['response']}; selected: {', '.join(rg['selection']['chosen'])}", ""]
        rows = [
            [n, b, se, z, sc]
            for n, b, se, z, sc in zip(fit["names"], fit["coefficients"], fit["se_sandwich"], fit["z"], fit["se_classical"])
        ]
        out += _md_table(["term", "coefficient", "se_sandwich", "z", "se_classical"], rows)
        out += _md_table(["n", "r2", "adj_r2", "aic"], [[fit["n"], fit["r2"], fit["adj_r2"], fit["aic"]]])

    am = data.get("amip", {})
    out += ["## AMIP", ""] + _md_status("amip", am)
    if am.get("status") == "ok":
        keys = ["name", "target", "direction", "success", "confirmed", "n_drop", "alpha", "base_qoi", "predicted_qoi", "refit_qoi"]
        out += _md_table(keys, [[r[k] for k in keys] for r in am["results"]])
        summ = am["summary"]
        out += _md_table(
            ["target", "success_rate", "confirmed_rate"],
            [[t, summ["success_rate"][t], summ["confirmed_rate"][t]] for t in TARGETS if t in summ["success_rate"]],
        )
        hk = ["target", "bin_low", "bin_high", "count", "confirmed"]
        out += _md_table(hk, [[h[k] for k in hk] for h in am["histogram"]])

    if data.get("warnings"):
        out += ["## Warnings", ""] + [f"- {w}" for w in data["warnings"]] + [""]
    out += ["## Assumptions", ""] + [f"- {a}" for a in data["assumptions"]] + [""]
    return "\n".join(out)


def emit_report(report: Report, out_dir: str | os.PathLike, formats: Sequence[str] = FORMATS) -> list[Path]:
    """Write the report files; raises ``OSError`` when ``out_dir`` cannot be written."""
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise ValueError(f"unknown formats {bad}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    written: list[Path] = []

    def write(name: str, text: str) -> None:
        path = out / name
        path.write_text(text, encoding="utf-8")
        written.append(path)

    text = report.to_json()
    if "json" in formats:
        write("report.json", text)
    if "markdown" in formats:
        write("report.md", render_markdown(json.loads(text)))
    if "csv" in formats:
        for name, frame in report.tables.items():
            path = out / f"{name}.csv"
            frame.to_csv(path, index=name == "features")
            written.append(path)
        for name, side in report.sidecars.items():
            write(f"{name}.json", canonical_json(side))
    write("timings.json", json.dumps({k: round(v, 6) for k, v in report.timings.items()}, indent=2, sort_keys=True) + "\n")
    return written
