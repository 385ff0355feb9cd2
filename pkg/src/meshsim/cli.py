"""Command-line experiment runner.

An experiment file is a YAML document::

    name: strategies
    seed: 0                  # master seed; each grid point derives its own
    seed_mode: derived       # or "shared": every point reuses the master seed
    output_dir: runs/strategies
    format: csv              # trajectory format, csv or jsonl
    config:                  # MeshConfig fields; omitted ones keep their defaults
      num_replicas: 4
      averaging: {strategy: ema_corrected}
    sweep:                   # optional grid, crossed in the order listed
      - path: averaging.strategy
        values: [fullsync_dpavg, sparta, async_sparta, ema_corrected]

Values given with ``--set path=value`` override the file, which overrides the
defaults. ``MESHSIM_OUTPUT_DIR`` overrides ``output_dir``; ``--output-dir``
overrides both.

Exit codes: 0 success, 1 usage or config error (or a grid point that raised),
2 I/O error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import itertools
import json
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .averaging import AveragingConfig
from .metrics import TrajectoryIOError, read_trajectory, write_trajectory
from .model import build_model
from .numerics import ConfigError, derive_seed
from .optim import EmaSchedule, LrSchedule
from .pipeline import StageDelayConfig
from .simulator import MeshConfig, run

OUTPUT_ENV = "MESHSIM_OUTPUT_DIR"
SUMMARY_COLUMNS = ("point", "seed", "overrides", "final_step", "final_consensus_loss",
                   "final_consensus_error", "diverged", "error", "config_sha256", "trajectory")
_SPEC_KEYS = {"name", "seed", "seed_mode", "output_dir", "format", "config", "sweep"}
_SECTIONS = {"lr": LrSchedule, "ema": EmaSchedule, "averaging": AveragingConfig, "stage_delays": StageDelayConfig}
# model and optimizer are free-form dicts checked when the objects are built
_NESTED = set(_SECTIONS) | {"model", "optimizer"}


@dataclass
class ExperimentSpec:
    name: str
    config: dict = field(default_factory=dict)
    sweep: list = field(default_factory=list)
    output_dir: str | None = None
    seed: int = 0
    seed_mode: str = "derived"
    format: str = "csv"

    @property
    def grid_size(self) -> int:
        n = 1
        for axis in self.sweep:
            n *= len(axis["values"])
        return n

    def points(self):
        """Yield ``(index, overrides, resolved MeshConfig)`` for every grid point."""
        axes = [(a["path"], a["values"]) for a in self.sweep]
        combos = itertools.product(*(vals for _, vals in axes)) if axes else [()]
        for idx, combo in enumerate(combos):
            overrides = {path: val for (path, _), val in zip(axes, combo)}
            tree = copy.deepcopy(self.config)
            for path, val in overrides.items():
                set_path(tree, path, val)
            seed = derive_seed(self.seed, idx) if self.seed_mode == "derived" else self.seed
            tree["seed"] = seed
            yield idx, overrides, resolve_config(tree)


def set_path(tree: dict, path: str, value):
    """Assign ``value`` at a dotted path, checking the path against MeshConfig."""
    parts = path.split(".")
    check_path(parts)
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{path}: {p} is not a nested section")
    node[parts[-1]] = value


def check_path(parts):
    path = ".".join(parts)
    top = {f.name for f in dataclasses.fields(MeshConfig)}
    if parts[0] not in top:
        raise ConfigError(f"{path}: unknown field")
    if parts[0] == "seed":
        raise ConfigError(f"{path}: the seed is set by the experiment, not the config")
    if len(parts) > 1 and parts[0] not in _NESTED:
        raise ConfigError(f"{path}: {parts[0]} has no sub-fields")
    if len(parts) > 2:
        raise ConfigError(f"{path}: nesting is at most one level deep")
    if len(parts) == 2 and parts[0] in ("lr", "ema", "averaging", "stage_delays"):
        if parts[1] not in {f.name for f in dataclasses.fields(_SECTIONS[parts[0]])}:
            raise ConfigError(f"{path}: unknown field")


def resolve_config(tree: dict) -> MeshConfig:
    """Build and fully validate a MeshConfig, including its model section."""
    try:
        cfg = MeshConfig.from_dict(tree)
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from exc
    try:
        build_model(cfg.model, cfg.num_replicas, cfg.num_stages, cfg.seed)
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from exc
    return cfg


def config_hash(cfg: MeshConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()


def load_spec(path, overrides=()) -> ExperimentSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise TrajectoryIOError(f"{path}: {exc.strerror or exc}") from exc
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    unknown = set(doc) - _SPEC_KEYS
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
    if "name" not in doc:
        raise ConfigError("name: required")
    config = doc.get("config") or {}
    if not isinstance(config, dict):
        raise ConfigError("config: expected a mapping")
    config = copy.deepcopy(config)
    for key in config:
        check_path([str(key)])
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item}: expected path=value")
        set_path(config, key.strip(), yaml.safe_load(raw))
    sweep = doc.get("sweep") or []
    if not isinstance(sweep, list):
        raise ConfigError("sweep: expected a list of {path, values}")
    for n, axis in enumerate(sweep):
        if not isinstance(axis, dict) or set(axis) != {"path", "values"}:
            raise ConfigError(f"sweep[{n}]: expected keys path and values")
        if not isinstance(axis["values"], list) or not axis["values"]:
            raise ConfigError(f"sweep[{n}].values: expected a non-empty list")
        check_path(str(axis["path"]).split("."))
    spec = ExperimentSpec(name=str(doc["name"]), config=config, sweep=sweep,
                          output_dir=doc.get("output_dir"), seed=int(doc.get("seed", 0)),
                          seed_mode=doc.get("seed_mode", "derived"), format=doc.get("format", "csv"))
    if spec.seed_mode not in ("derived", "shared"):
        raise ConfigError(f"seed_mode: expected derived or shared, got {spec.seed_mode!r}")
    if spec.format not in ("csv", "jsonl"):
        raise ConfigError(f"format: expected csv or jsonl, got {spec.format!r}")
    return spec


def _slug(overrides: dict) -> str:
    text = "_".join(f"{k.split('.')[-1]}-{v}" for k, v in overrides.items())
    return re.sub(r"[^A-Za-z0-9._-]+", "", text)[:80]


def output_dir_for(spec: ExperimentSpec, flag: str | None) -> Path:
    return Path(flag or os.environ.get(OUTPUT_ENV) or spec.output_dir or Path("runs") / spec.name)


def run_experiment(spec: ExperimentSpec, out_dir: Path, log=print) -> tuple[list[dict], int]:
    """Run every grid point serially; returns the summary rows and the exit code."""
    points = list(spec.points())
    log(f"{spec.name}: {len(points)} grid point(s)")
    rows, status = [], 0
    for idx, overrides, cfg in points:
        fname = f"point_{idx:03d}" + (f"_{_slug(overrides)}" if overrides else "") + f".{spec.format}"
        row = {"point": idx, "seed": cfg.seed, "overrides": json.dumps(overrides, sort_keys=True),
               "config_sha256": config_hash(cfg), "trajectory": fname, "error": ""}
        try:
            traj = run(cfg)
        except (ConfigError, RuntimeError, ValueError) as exc:
            row.update(final_step="", final_consensus_loss="", final_consensus_error="", diverged="",
                       error=str(exc))
            status = 1
            log(f"  point {idx}: error: {exc}")
            rows.append(row)
            continue
        write_trajectory(traj.records, out_dir / fname, spec.format)
        fin = traj.final
        row.update(final_step=fin.step, final_consensus_loss=format(fin.consensus_loss, ".17g"),
                   final_consensus_error=format(fin.consensus_error, ".17g"), diverged=int(fin.diverged))
        log(f"  point {idx} {row['overrides']}: loss {fin.consensus_loss:.6g}"
            + (" (diverged)" if fin.diverged else ""))
        rows.append(row)
    write_summary(rows, out_dir / "summary.csv")
    return rows, status


def write_summary(rows, path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise TrajectoryIOError(f"{path}: {exc.strerror or exc}") from exc


def compare_trajectories(path_a, path_b) -> list[dict]:
    """Per-eval-step gaps ``b - a`` in consensus loss and consensus error."""
    a, b = read_trajectory(path_a), read_trajectory(path_b)
    steps_a, steps_b = [r.step for r in a], [r.step for r in b]
    if steps_a != steps_b:
        raise ConfigError(f"mismatched eval grids: {path_a} has {len(steps_a)} evals, "
                          f"{path_b} has {len(steps_b)} (or different steps)")
    out = []
    for ra, rb in zip(a, b):
        dl = rb.consensus_loss - ra.consensus_loss
        out.append({
            "step": ra.step,
            "loss_a": ra.consensus_loss, "loss_b": rb.consensus_loss, "loss_gap": dl,
            "loss_gap_rel": dl / ra.consensus_loss if ra.consensus_loss else float("nan"),
            "error_a": ra.consensus_error, "error_b": rb.consensus_error,
            "error_gap": rb.consensus_error - ra.consensus_error,
        })
    return out


def _parser():
    p = argparse.ArgumentParser(prog="meshsim", description="Simulate replica averaging on a pipeline mesh.")
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="run every point of an experiment file")
    r.add_argument("spec")
    r.add_argument("--output-dir")
    r.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")
    v = sub.add_parser("validate", help="parse and validate an experiment file without running it")
    v.add_argument("spec")
    v.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")
    c = sub.add_parser("compare", help="gap report between two trajectory files (b minus a)")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.add_argument("--output", help="write the report as CSV here instead of stdout")
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        if args.verb == "compare":
            report = compare_trajectories(args.run_a, args.run_b)
            fh = open(args.output, "w", newline="") if args.output else sys.stdout
            try:
                w = csv.DictWriter(fh, fieldnames=list(report[0]))
                w.writeheader()
                for row in report:
                    w.writerow({k: format(v, ".10g") if isinstance(v, float) else v for k, v in row.items()})
            finally:
                if args.output:
                    fh.close()
            fin = report[-1]
            print(f"final step {fin['step']}: loss gap {fin['loss_gap']:.6g} "
                  f"({fin['loss_gap_rel']:+.2%}), consensus error gap {fin['error_gap']:.6g}", file=sys.stderr)
            return 0
        spec = load_spec(args.spec, args.set)
        if args.verb == "validate":
            n = sum(1 for _ in spec.points())
            print(f"{spec.name}: ok, {n} grid point(s)")
            return 0
        _, status = run_experiment(spec, output_dir_for(spec, args.output_dir))
        return status
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (TrajectoryIOError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
