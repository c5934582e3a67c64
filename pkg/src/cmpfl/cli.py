"""Command-line front end.

    cmpfl run    CONFIG [--seed N] [--trials N] [--out DIR]
    cmpfl sweep  CONFIG [--seed N] [--trials N] [--out DIR] [--threads N]
    cmpfl oracle CONFIG [--seed N]

Configs are JSON (schema in ``config_schema.json``). Unknown keys, wrong
types and violated invariants are rejected with the file, line and key.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import itertools
import json
import re
import sys
import types
import typing
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .aggregation import (
    AggregationRule,
    ClientUpdate,
    KrumGuaranteeWarning,
    aggregate_krum,
    aggregate_trimmed_mean,
)
from .attacks import CmpHyper, compute_E
from .engine import (
    AttackConfig,
    DataConfig,
    ExperimentConfig,
    MetricsReport,
    ModelConfig,
    NkbConfig,
    run_experiment,
)
from .models import TrainParams
from .oracles import (
    krum_select_bruteforce,
    min_benign_score_bruteforce,
    random_instance,
    trimmed_mean_bruteforce,
)

REPORT_FORMAT = 1
ORACLE_CHECKS = ("krum", "E", "trimmed-mean")
ORACLE_MAX_CLIENTS = 8

# dataclass behind each nested config section
_SECTIONS: dict[type, dict[str, type]] = {
    ExperimentConfig: {
        "model": ModelConfig,
        "data": DataConfig,
        "aggregation": AggregationRule,
        "attack": AttackConfig,
        "train": TrainParams,
    },
    AttackConfig: {"cmp": CmpHyper, "nkb": NkbConfig},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SweepSpec:
    base: ExperimentConfig
    axes: tuple[tuple[str, tuple], ...]  # (dotted field path, values)
    cells: tuple[ExperimentConfig, ...]


@dataclass(frozen=True)
class OracleConfig:
    instances: int = 100
    max_clients: int = ORACLE_MAX_CLIENTS
    max_dim: int = 5
    seed: int = 0
    checks: tuple[str, ...] = ORACLE_CHECKS

    def __post_init__(self):
        if self.instances < 1:
            raise ValueError("instances must be positive")
        if not 4 <= self.max_clients <= ORACLE_MAX_CLIENTS:
            raise ValueError(f"max_clients must lie in [4, {ORACLE_MAX_CLIENTS}]")
        if self.max_dim < 1:
            raise ValueError("max_dim must be positive")
        unknown = set(self.checks) - set(ORACLE_CHECKS)
        if unknown or not self.checks:
            raise ValueError(f"checks must be a nonempty subset of {ORACLE_CHECKS}")


# -- parsing ----------------------------------------------------------------


class _Source:
    """Raw config text, used to point error messages at a line."""

    def __init__(self, path: Path, text: str):
        self.path, self.text = path, text

    def line_of(self, keys: tuple[str, ...]) -> int:
        pos = 0
        for key in keys:
            m = re.compile(r'"' + re.escape(key) + r'"\s*:').search(self.text, pos)
            if m is None:
                break
            pos = m.start()
        return self.text.count("\n", 0, pos) + 1

    def error(self, keys: tuple[str, ...], message: str) -> ConfigError:
        where = ".".join(keys) or "<root>"
        return ConfigError(f"{self.path}:{self.line_of(keys)}: {where}: {message}")


def _type_name(hint) -> str:
    return getattr(hint, "__name__", None) or str(hint).replace("typing.", "")


def _json_name(value) -> str:
    return {dict: "object", list: "array", str: "string", bool: "boolean", type(None): "null"}.get(
        type(value), "number"
    )


def _coerce(value, hint, keys, src: _Source):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(hint)
        if value is None and type(None) in options:
            return None
        for opt in options:
            if opt is type(None):
                continue
            try:
                return _coerce(value, opt, keys, src)
            except ConfigError:
                continue
        raise src.error(keys, f"expected {' | '.join(_type_name(o) for o in options)}, got {_json_name(value)}")
    if origin is tuple:
        if not isinstance(value, list):
            raise src.error(keys, f"expected array, got {_json_name(value)}")
        inner = typing.get_args(hint)[0]
        return tuple(_coerce(v, inner, keys, src) for v in value)
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, str):
            return value
    else:
        raise src.error(keys, f"unsupported field type {hint!r}")
    raise src.error(keys, f"expected {_type_name(hint)}, got {_json_name(value)}")


def _build(cls, raw, keys: tuple[str, ...], src: _Source):
    if not isinstance(raw, dict):
        raise src.error(keys, f"expected object, got {_json_name(raw)}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = [k for k in raw if k not in names]
    if unknown:
        raise src.error(keys + (unknown[0],), f"unknown key (allowed: {', '.join(names)})")
    sections = _SECTIONS.get(cls, {})
    kwargs = {}
    for name, value in raw.items():
        if name in sections:
            kwargs[name] = _build(sections[name], value, keys + (name,), src)
        else:
            kwargs[name] = _coerce(value, hints[name], keys + (name,), src)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        # point at the first field the message mentions, else at the section
        message = str(exc)
        named = [n for n in raw if re.search(r"\b" + re.escape(n) + r"\b", message)]
        raise src.error(keys + (named[0],) if named else keys, message) from None


def _field_exists(path: str) -> bool:
    cls = ExperimentConfig
    parts = path.split(".")
    for i, part in enumerate(parts):
        if part not in {f.name for f in dataclasses.fields(cls)}:
            return False
        nested = _SECTIONS.get(cls, {}).get(part)
        if nested is None:
            return i == len(parts) - 1
        cls = nested
    return False


def _set_path(raw: dict, path: str, value) -> dict:
    out = copy.deepcopy(raw)
    node = out
    parts = path.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


def _load(path) -> tuple[dict, _Source]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    src = _Source(path, text)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise src.error((), "top level must be an object")
    return raw, src


def parse_config(path, seed: int | None = None, trials: int | None = None) -> ExperimentConfig | SweepSpec:
    """Read a run or sweep config. A top-level ``sweep`` object turns it into
    a grid over one or two dotted field paths."""
    raw, src = _load(path)
    if seed is not None:
        raw["seed"] = seed
    if trials is not None:
        raw["trials"] = trials
    sweep = raw.pop("sweep", None)
    base = _build(ExperimentConfig, raw, (), src)
    if sweep is None:
        return base
    if not isinstance(sweep, dict) or not 1 <= len(sweep) <= 2:
        raise src.error(("sweep",), "expected an object with one or two swept fields")
    axes = []
    for field_path, values in sweep.items():
        keys = ("sweep", field_path)
        if not _field_exists(field_path):
            raise src.error(keys, "not a field of the experiment config")
        if not isinstance(values, list) or not values:
            raise src.error(keys, "expected a nonempty array of values")
        axes.append((field_path, tuple(values)))
    cells = []
    for combo in itertools.product(*(values for _, values in axes)):
        cell_raw = raw
        for (field_path, _), value in zip(axes, combo):
            cell_raw = _set_path(cell_raw, field_path, value)
        try:
            cells.append(_build(ExperimentConfig, cell_raw, (), src))
        except ConfigError as exc:
            cell = ", ".join(f"{p}={v!r}" for (p, _), v in zip(axes, combo))
            raise ConfigError(f"{exc} (sweep cell {cell})") from None
    return SweepSpec(base, tuple(axes), tuple(cells))


def parse_oracle_config(path, seed: int | None = None) -> OracleConfig:
    raw, src = _load(path)
    if seed is not None:
        raw["seed"] = seed
    return _build(OracleConfig, raw, (), src)


# -- reports ----------------------------------------------------------------


def _num(v) -> str:
    """Shortest decimal that round-trips to the same float."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _round_rows(report: MetricsReport):
    for trial, records in enumerate(report.records):
        for rec in records:
            for name, value in rec.metrics.items():
                yield trial, rec.t, name, value
            if rec.selected_id is not None:
                yield trial, rec.t, "selected_id", rec.selected_id
            if rec.success is not None:
                yield trial, rec.t, "attack_success", rec.success


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def report_header(cfg: ExperimentConfig) -> dict:
    return {"format": REPORT_FORMAT, "seed": cfg.seed, "config": cfg.to_dict()}


def write_run_report(report: MetricsReport, cfg: ExperimentConfig, out: Path) -> None:
    """``report.json`` and ``rounds.csv`` are deterministic; wall-clock goes to ``timing.json``."""
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", {**report_header(cfg), **report.summary()})
    _write_csv(
        out / "rounds.csv",
        ["trial", "round", "metric", "value"],
        ((trial, t, name, _num(v)) for trial, t, name, v in _round_rows(report)),
    )
    _write_json(out / "timing.json", report.timing())


_SWEEP_METRICS = ("loss", "error_rate", "attacker_accuracy")


def _run_cell(cfg: ExperimentConfig) -> MetricsReport:
    return run_experiment(cfg)


def write_sweep_report(spec: SweepSpec, reports: list[MetricsReport], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    names = [p for p, _ in spec.axes]
    header = names + [f"final_{m}" for m in _SWEEP_METRICS] + ["success_rate", "trials"]
    rows, cells, timing = [], [], []
    for cfg, combo, report in zip(spec.cells, itertools.product(*(v for _, v in spec.axes)), reports):
        row = [json.dumps(v) if not isinstance(v, (int, float)) else _num(v) for v in combo]
        row += [_num(report.mean(m)) if m in report.final else "" for m in _SWEEP_METRICS]
        row += ["" if report.success_rate is None else _num(report.mean_success_rate), cfg.trials]
        rows.append(row)
        cells.append({"axes": dict(zip(names, combo)), **report_header(cfg), **report.summary()})
        timing.append({"axes": dict(zip(names, combo)), **report.timing()})
    _write_csv(out / "sweep.csv", header, rows)
    _write_json(out / "sweep.json", {"format": REPORT_FORMAT, "seed": spec.base.seed, "cells": cells})
    _write_json(out / "timing.json", timing)


# -- oracle -----------------------------------------------------------------


def run_oracle(cfg: OracleConfig, stream=None) -> bool:
    """Cross-check vectorised rules against brute force; print one line per check."""
    stream = sys.stdout if stream is None else stream
    rng = np.random.default_rng(cfg.seed)
    ok = True
    for i in range(cfg.instances):
        pts, m = random_instance(rng, cfg.max_clients, cfg.max_dim)
        n = pts.shape[0]
        ups = [ClientUpdate(j, pts[j]) for j in range(n)]
        for check in cfg.checks:
            if check == "krum":
                with warnings.catch_warnings():
                    # tiny instances routinely sit outside Krum's guarantee; only selection matters here
                    warnings.simplefilter("ignore", KrumGuaranteeWarning)
                    got = aggregate_krum(ups, m).selected_id
                want = krum_select_bruteforce(pts, list(range(n)), m)
                match, detail = got == want, f"selected {got} vs {want}"
            elif check == "trimmed-mean":
                k = int(rng.integers(0, (n - 1) // 2 + 1))
                got = aggregate_trimmed_mean(ups, k).global_params
                want = np.array(trimmed_mean_bruteforce(pts, k))
                match, detail = bool(np.array_equal(got, want)), f"k={k}"
            else:
                M = int(rng.integers(1, n - 2))
                benign = pts[: n - M] if n - M >= 3 else pts
                U = benign.shape[0] + M
                got = compute_E(benign, M, U)
                want = min_benign_score_bruteforce(benign, M, U)
                match, detail = abs(got - want) <= 1e-12 * max(1.0, abs(want)), f"E {got!r} vs {want!r}"
            ok &= match
            print(f"instance {i} {check}: {'MATCH' if match else 'MISMATCH ' + detail}", file=stream)
    return ok


# -- entry point --------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmpfl", description="Covert model poisoning experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("run", "run one experiment"), ("sweep", "run a grid of experiments"), ("oracle", "brute-force cross-checks")):
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        if name != "oracle":
            p.add_argument("--trials", type=int, help="override the number of trials")
            p.add_argument("--out", default="cmpfl-out", help="report directory (default: %(default)s)")
        if name == "sweep":
            p.add_argument("--threads", type=int, default=1, help="worker processes for sweep cells")
    return parser


def run_cli(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "oracle":
            return 0 if run_oracle(parse_oracle_config(args.config, args.seed)) else 1
        parsed = parse_config(args.config, args.seed, args.trials)
        out = Path(args.out)
        if args.command == "run":
            if isinstance(parsed, SweepSpec):
                raise ConfigError(f"{args.config}: has a 'sweep' section; use the sweep command")
            report = run_experiment(parsed)
            write_run_report(report, parsed, out)
            print(json.dumps(report.summary()["final"], sort_keys=True))
        else:
            if not isinstance(parsed, ExperimentConfig) and not parsed.cells:
                raise ConfigError(f"{args.config}: empty sweep")
            if isinstance(parsed, ExperimentConfig):
                raise ConfigError(f"{args.config}: no 'sweep' section")
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            if args.threads > 1:
                with ProcessPoolExecutor(max_workers=args.threads) as pool:
                    reports = list(pool.map(_run_cell, parsed.cells))
            else:
                reports = [_run_cell(c) for c in parsed.cells]
            write_sweep_report(parsed, reports, out)
            print(f"{len(reports)} cells written to {out / 'sweep.csv'}")
    except (ConfigError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    return 0


def main() -> None:
    sys.exit(run_cli())
