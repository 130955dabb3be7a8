"""Pipeline configuration: TOML file, key reference and command-line overrides."""

from __future__ import annotations

import argparse
import copy
import sys
from dataclasses import dataclass
from typing import Any, Callable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


def _int_list(v: Any) -> list[int]:
    if isinstance(v, str):
        out: list[int] = []
        for part in v.split(","):
            part = part.strip()
            if ".." in part:
                a, b = part.split("..")
                out.extend(range(int(a), int(b) + 1))
            elif part:
                out.append(int(part))
        return out
    return [int(x) for x in v]


def _str_list(v: Any) -> list[str]:
    if isinstance(v, str):
        return [s.strip() for s in v.split(",") if s.strip()]
    return [str(x) for x in v]


def _bool(v: Any) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _sample_size(v: Any) -> int | str:
    if isinstance(v, str) and v.strip().lower() == "all":
        return "all"
    return int(v)


def _tri(v: Any) -> str:
    s = str(v).strip().lower()
    if s == "auto":
        return "auto"
    return "true" if _bool(s) else "false"


@dataclass(frozen=True)
class Option:
    section: str
    key: str
    default: Any
    parse: Callable[[Any], Any]
    flag: str
    help: str
    choices: tuple | None = None
    echo: bool = True


OPTIONS: tuple[Option, ...] = (
    Option("", "seed", 0, int, "--seed", "root seed for every random choice"),
    Option("", "threads", 1, int, "--threads", "worker threads for the unicity engine (results do not depend on it)", echo=False),
    Option("input", "path", "", str, "--input", "event log to read"),
    Option("input", "format", "csv", str, "--format", "log format", ("csv", "jsonl")),
    Option("input", "actor_col", "actor", str, "--actor-col", "actor identifier column"),
    Option("input", "ts_col", "timestamp", str, "--ts-col", "timestamp column"),
    Option("input", "ts_format", "iso8601", str, "--ts-format", "timestamp encoding", ("iso8601", "epoch")),
    Option("input", "attr_cols", [], _str_list, "--attr-cols", "comma-separated categorical attribute columns"),
    Option("input", "skip_bad_rows", False, _bool, "--skip-bad-rows", "skip and count malformed rows instead of failing"),
    Option("qi", "levels", ["minute", "quarter_hour", "hour", "date"], _str_list, "--levels", "timestamp generalization levels"),
    Option("qi", "attributes", [], _str_list, "--qi-attributes", "attributes added to the quasi-identifier tuple"),
    Option("qi", "date_tz_offset_min", 0, int, "--date-tz-offset-min", "minutes east of UTC used for date windows"),
    Option("unicity", "epsilons", list(range(1, 9)), _int_list, "--epsilons", "observation counts, e.g. 1..8 or 1,2,4"),
    Option("unicity", "sample_size", 2500, _sample_size, "--sample-size", "targets per run (integer or 'all')"),
    Option("unicity", "n_seeds", 10, int, "--n-seeds", "Monte Carlo runs averaged per (level, epsilon)"),
    Option("unicity", "bootstrap_reps", 1000, int, "--bootstrap-reps", "bootstrap replicates for the 95% interval"),
    Option("unicity", "short_trajectory_policy", "exclude", str, "--short-policy", "actors with fewer tuples than epsilon", ("exclude", "clamp")),
    Option("features", "timeout_s", 1800, int, "--timeout-s", "inactivity gap that ends a session (seconds)"),
    Option("features", "tail_cap_s", 300, int, "--tail-cap-s", "time credited after a session's last event (seconds)"),
    Option("features", "tz_offset_min", 0, int, "--tz-offset-min", "minutes east of UTC for time-of-day windows and dates"),
    Option("features", "duration_mode", "session", str, "--duration-mode", "how time per window is measured", ("session", "count")),
    Option("regression", "max_terms", 5, int, "--max-terms", "largest model size considered"),
    Option("regression", "criterion", "adjusted_r2", str, "--criterion", "model selection criterion", ("adjusted_r2", "aic")),
    Option("regression", "select", True, _bool, "--select", "search feature subsets; false fits every candidate column"),
    Option("regression", "alpha", 0.05, float, "--alpha", "two-sided significance level"),
    Option("amip", "alpha_cap", 0.5, float, "--alpha-cap", "largest fraction of rows the search may remove"),
    Option("amip", "include_ids", "auto", _tri, "--include-ids", "list removed actor ids: auto (only for synthetic input), true, false"),
    Option("output", "dir", "out", str, "--out", "output directory", echo=False),
    Option("output", "formats", ["json", "markdown", "csv"], _str_list, "--formats", "report formats (json, markdown, csv)"),
)

SECTIONS = ("input", "qi", "unicity", "features", "regression", "amip", "output")


def defaults() -> dict:
    cfg: dict = {s: {} for s in SECTIONS}
    for o in OPTIONS:
        (cfg[o.section] if o.section else cfg)[o.key] = copy.deepcopy(o.default)
    return cfg


def _lookup(section: str, key: str) -> Option:
    for o in OPTIONS:
        if o.section == section and o.key == key:
            return o
    where = f"[{section}] " if section else ""
    raise ConfigError(f"unknown config key {where}{key!r}")


def _set(cfg: dict, o: Option, raw: Any) -> None:
    try:
        value = o.parse(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {o.section + '.' if o.section else ''}{o.key}: {exc}") from exc
    if o.choices and value not in o.choices:
        raise ConfigError(f"{o.key} must be one of {o.choices}, got {value!r}")
    (cfg[o.section] if o.section else cfg)[o.key] = value


def merge(base: dict, data: dict) -> dict:
    """Validate ``data`` (parsed TOML) against the key reference and overlay it on ``base``."""
    cfg = copy.deepcopy(base)
    for k, v in data.items():
        if isinstance(v, dict):
            if k not in SECTIONS:
                raise ConfigError(f"unknown config section [{k}]")
            for kk, vv in v.items():
                _set(cfg, _lookup(k, kk), vv)
        else:
            _set(cfg, _lookup("", k), v)
    return cfg


def load(path: str | None) -> dict:
    cfg = defaults()
    if path:
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        cfg = merge(cfg, data)
    return cfg


def add_flags(parser: argparse.ArgumentParser, sections: tuple[str, ...] | None = None) -> None:
    """Register one override flag per config key (all default to 'not given')."""
    for o in OPTIONS:
        if sections is not None and o.section not in sections and o.section:
            continue
        parser.add_argument(o.flag, dest=f"cfg__{o.section}__{o.key}", default=None, metavar=o.key.upper(), help=f"{o.help} [{o.section or 'top'}.{o.key}]")
    if sections is None or "amip" in sections:
        parser.add_argument("--no-ids", dest="cfg__amip__include_ids", action="store_const", const="false", help="never list removed actor ids")


def apply_flags(cfg: dict, ns: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(cfg)
    for name, raw in vars(ns).items():
        if not name.startswith("cfg__") or raw is None:
            continue
        _, section, key = name.split("__", 2)
        _set(cfg, _lookup(section, key), raw)
    return cfg


def echo(cfg: dict) -> dict:
    """Config as recorded in reports: execution-only keys are left out."""
    out = copy.deepcopy(cfg)
    for o in OPTIONS:
        if not o.echo:
            (out[o.section] if o.section else out).pop(o.key, None)
    return out


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def reference_toml() -> str:
    """A complete, commented config file listing every key with its default."""
    lines = ["# logrisk pipeline configuration; every key can also be set with the flag shown.", ""]
    for section in ("",) + SECTIONS:
        opts = [o for o in OPTIONS if o.section == section]
        if section:
            lines.append(f"[{section}]")
        for o in opts:
            choices = f" one of {', '.join(o.choices)};" if o.choices else ""
            lines.append(f"# {o.help};{choices} flag {o.flag}")
            lines.append(f"{o.key} = {_toml_value(o.default)}")
        lines.append("")
    return "\n".join(lines)
