"""Batch experiment runner.

A config is one YAML file::

    scenario:        # a preset name, or a mapping of ScenarioConfig fields
      rho: 0.2
    round_config:    # RoundConfig fields; strategy/tau_min come from the method
      total_rounds: 50
    methods: [FedPCA(D), FedPCA(HS), FedAvg, LossWeighted(q=1.0)]
    seeds: [0, 1, 2]
    output_dir: runs/reference

Each (method, seed) cell writes ``<stem>.csv`` (one row per round) and
``<stem>.json`` (final-window summary), FedPCA cells also write
``analysis/<stem>.csv``, and ``index.json`` lists every cell and its status.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import re
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import fed_core
from .analysis import write_analysis_csv
from .fed_core import RoundConfig, SelectionStrategy
from .synth_data import ConfigError, ScenarioConfig, build_scenario

log = logging.getLogger("fedpca")

SCENARIO_PRESETS: dict[str, dict] = {
    "reference": {},
    "clean": {"rho": 0.0},
    "partial_noise": {"eta": 0.5},
    "uniform_noise": {"noise_placement": "uniform"},
    "dirichlet": {"partition": "dirichlet", "dirichlet_beta": 2.0},
    "mixed": {"partition": "mixed", "mixed_alphas": [0.8, 0.6, 0.4, 0.2, 0.0]},
}

_METHOD_RE = re.compile(r"^(FedPCA)\((D|HS)\)$|^(FedAvg)$|^(LossWeighted)\((?:q=)?([0-9.eE+-]+)\)$")
_TOP_KEYS = ("scenario", "round_config", "methods", "seeds", "output_dir")


@dataclass(frozen=True)
class MethodSpec:
    name: str  # display name, also used in filenames
    core: str  # one of fed_core.METHODS
    strategy: str = "drop"
    q: float = 1.0


def parse_method(text: str) -> MethodSpec:
    m = _METHOD_RE.match(str(text).replace(" ", ""))
    if not m:
        raise ConfigError(f"methods: unknown method {text!r}; expected FedPCA(D), FedPCA(HS), FedAvg or LossWeighted(q)")
    if m.group(1):
        return MethodSpec(f"FedPCA({m.group(2)})", "FedPCA", "drop" if m.group(2) == "D" else "hs")
    if m.group(3):
        return MethodSpec("FedAvg", "FedAvg")
    try:
        q = float(m.group(5))
    except ValueError:
        raise ConfigError(f"methods: bad q in {text!r}") from None
    if q < 0:
        raise ConfigError(f"methods: q must be nonnegative in {text!r}")
    return MethodSpec(f"LossWeighted(q={q!r})", "LossWeighted", q=q)


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig
    round_config: RoundConfig
    methods: tuple[str, ...]
    seeds: tuple[int, ...]
    output_dir: str

    def __post_init__(self) -> None:
        if not self.methods:
            raise ConfigError("methods: must be a nonempty list")
        if not self.seeds:
            raise ConfigError("seeds: must be a nonempty list")
        names = [parse_method(m).name for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError("methods: duplicate entries")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds: duplicate entries")
        object.__setattr__(self, "methods", tuple(names))

    def to_dict(self) -> dict:
        rc = dataclasses.asdict(self.round_config)
        return {
            "scenario": self.scenario.to_dict(),
            "round_config": rc,
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def with_overrides(self, output_dir: str | None = None, seed: int | None = None) -> ExperimentConfig:
        out = self
        if output_dir is not None:
            out = dataclasses.replace(out, output_dir=str(output_dir))
        if seed is not None:
            out = dataclasses.replace(out, seeds=(int(seed),))
        return out


def _check_fields(section: str, cls, data: dict) -> dict:
    """Reject unknown keys and values whose type disagrees with the field default."""
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{section}: unknown key {key!r}")
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        name = f"{section}.{key}"
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name}: expected an integer, got {value!r}")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}: expected a number, got {value!r}")
            value = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{name}: expected a string, got {value!r}")
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{name}: expected a list, got {value!r}")
        out[key] = value
    return out


def _wrap(section: str, build):
    try:
        return build()
    except ConfigError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(section) else f"{section}: {msg}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    unknown = [k for k in data if k not in _TOP_KEYS]
    if unknown:
        raise ConfigError(f"config: unknown key {unknown[0]!r}")
    for key in ("methods", "seeds", "output_dir"):
        if key not in data:
            raise ConfigError(f"{key}: missing required field")

    raw_scn = data.get("scenario", "reference")
    if isinstance(raw_scn, str):
        if raw_scn not in SCENARIO_PRESETS:
            raise ConfigError(f"scenario: unknown preset {raw_scn!r}")
        raw_scn = dict(SCENARIO_PRESETS[raw_scn])
    scn = _check_fields("scenario", ScenarioConfig, raw_scn)
    scenario = _wrap("scenario", lambda: ScenarioConfig(**scn))

    raw_rc = dict(data.get("round_config") or {})
    strategy = raw_rc.pop("strategy", None)
    rc = _check_fields("round_config", RoundConfig, raw_rc)
    if strategy is not None:
        st = _check_fields("round_config.strategy", SelectionStrategy, strategy)
        rc["strategy"] = _wrap("round_config.strategy", lambda: SelectionStrategy(**st))
    round_config = _wrap("round_config", lambda: RoundConfig(**rc))

    methods = data["methods"]
    if not isinstance(methods, list):
        raise ConfigError("methods: expected a list")
    seeds = data["seeds"]
    if not isinstance(seeds, list) or any(isinstance(s, bool) or not isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: expected a list of integers")
    if not isinstance(data["output_dir"], str) or not data["output_dir"]:
        raise ConfigError("output_dir: expected a nonempty path string")
    return ExperimentConfig(scenario, round_config, tuple(str(m) for m in methods), tuple(seeds), data["output_dir"])


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: malformed YAML: {exc}") from None
    return config_from_dict(data)


# ---------------------------------------------------------------- matrix


def artifact_stem(method: str, seed: int, scenario_hash: str) -> str:
    slug = re.sub(r"[^A-Za-z0-9.=-]+", "_", method).strip("_")
    return f"{slug}__seed{seed}__{scenario_hash}"


def _run_cell(scenario: ScenarioConfig, round_config: RoundConfig, method: str, seed: int):
    choice = parse_method(method)
    rc = round_config
    if choice.core == "FedPCA":
        rc = dataclasses.replace(rc, strategy=SelectionStrategy(choice.strategy, rc.strategy.tau_min))
    elif choice.core == "LossWeighted":
        rc = dataclasses.replace(rc, baseline_q=choice.q)
    scn = dataclasses.replace(scenario, seed=seed)
    clients, tests = build_scenario(scn)
    return fed_core.run_experiment(
        clients, tests, rc, choice.core, seed, scn.num_classes, scn.scenario_hash(), method_label=choice.name
    )


def _check_writable(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=out, prefix=".probe"):
            pass
    except OSError as exc:
        raise OSError(f"output_dir {str(out)!r} is not writable: {exc}") from None


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _csv_text(header: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def run_matrix(config: ExperimentConfig, deterministic: bool = True, workers: int | None = None) -> int:
    """Run every (method, seed) cell; return 0 when all succeed, 1 otherwise."""
    out = Path(config.output_dir)
    _check_writable(out)
    cells = [(m, s) for m in config.methods for s in config.seeds]

    results: list = []
    if deterministic or len(cells) == 1 or workers == 1:
        for m, s in cells:
            results.append(_guarded(config, m, s))
    else:
        n = workers or min(len(cells), os.cpu_count() or 1)
        with ProcessPoolExecutor(max_workers=n) as pool:
            futures = [pool.submit(_guarded, config, m, s) for m, s in cells]
            results = [f.result() for f in futures]

    index = []
    failed = 0
    for (method, seed), (report, error) in zip(cells, results):
        h = dataclasses.replace(config.scenario, seed=seed).scenario_hash()
        stem = artifact_stem(method, seed, h)
        entry = {"method": method, "seed": seed, "scenario_hash": h}
        if error is not None:
            failed += 1
            log.error("cell %s seed %d failed: %s", method, seed, error)
            entry.update(status="failed", error=error, csv=None, json=None, analysis=None)
            index.append(entry)
            continue
        _write_text(out / f"{stem}.csv", _csv_text(report.csv_header(), report.csv_rows()))
        _write_text(out / f"{stem}.json", json.dumps(report.summary_dict(), indent=2) + "\n")
        analysis = None
        if report.analysis_rows is not None:
            (out / "analysis").mkdir(exist_ok=True)
            analysis = f"analysis/{stem}.csv"
            write_analysis_csv(out / analysis, report.analysis_rows)
        warnings = sum(1 for r in report.records if r.warning)
        entry.update(status="ok", error=None, csv=f"{stem}.csv", json=f"{stem}.json", analysis=analysis,
                     warning_rounds=warnings)
        index.append(entry)
        log.info("cell %s seed %d done", method, seed)

    _write_text(out / "index.json", json.dumps({"config": config.to_dict(), "cells": index}, indent=2) + "\n")
    return 1 if failed else 0


def _guarded(config: ExperimentConfig, method: str, seed: int):
    try:
        return _run_cell(config.scenario, config.round_config, method, seed), None
    except Exception as exc:  # isolate cells; the index records the failure
        return None, f"{type(exc).__name__}: {exc}"


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedpca", description="Run a seeded FedPCA / FedAvg experiment matrix.")
    p.add_argument("config", nargs="?", help="YAML experiment config")
    p.add_argument("--output-dir", help="override output_dir from the config")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--deterministic", action="store_true", help="force serial execution")
    p.add_argument("--workers", type=int, default=None, help="process count when not deterministic")
    p.add_argument("--list-scenarios", action="store_true", help="print scenario presets and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.list_scenarios:
        for name, overrides in SCENARIO_PRESETS.items():
            print(f"{name}: {json.dumps(overrides) if overrides else '(defaults)'}")
        return 0
    if not args.config:
        print("error: a config path is required", file=sys.stderr)
        return 2
    try:
        config = parse_config(args.config).with_overrides(args.output_dir, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return run_matrix(config, deterministic=args.deterministic, workers=args.workers)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
