"""Command-line driver: ``lnms {run,improve,bench,partition}``.

Every command reads one JSON config, applies flag overrides, echoes the
merged config into the output directory and writes its artifacts there.
Exit status is 0 on success, 1 on runtime or solver failure and 2 on
usage or config errors.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bench import (
    closed_loop_rollout,
    export_partition_grid,
    make_environment,
    run_mip_fraction_experiment,
    run_wallclock_comparison,
)
from .errors import HybridLnmsError, InvalidParameter, InvalidRegion
from .lnms import LnmsController, SampleStore, improve_samples

logger = logging.getLogger("hybrid_lnms")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

_SECTIONS = {
    "system": None,  # free-form builder keywords, checked by the builder
    "ocp": {"N", "Q", "R", "beta", "big_M"},
    "lnms": {"weights", "dedup", "seed_store"},
    "solver": {"time_limit", "gap_tol", "stop_at_first_feasible", "node_limit"},
    "experiment": {"rollouts", "steps", "region", "seed", "convergence_eps", "window",
                   "max_total_steps", "n_ocps", "resolution", "bounds", "budget", "store", "u0"},
}

_EXPERIMENT_DEFAULTS = {
    "rollouts": 10, "steps": None, "region": None, "seed": 0, "convergence_eps": None,
    "window": 100, "max_total_steps": None, "n_ocps": 10, "resolution": 50, "bounds": None,
    "budget": 1.0, "store": None, "u0": False,
}


class ConfigError(HybridLnmsError):
    pass


@dataclass
class RunConfig:
    """Validated run configuration (one JSON document)."""

    env: str = "cart1"
    system: dict = field(default_factory=dict)
    ocp: dict = field(default_factory=dict)
    lnms: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)
    out: str = "out"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - {"env", *(_SECTIONS), "out"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(env=doc.get("env", "cart1"), out=str(doc.get("out", "out")))
        for name, allowed in _SECTIONS.items():
            sec = doc.get(name) or {}
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be an object")
            if allowed is not None and set(sec) - allowed:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(set(sec) - allowed)}")
            setattr(cfg, name, copy.deepcopy(sec))
        cfg.experiment = {**_EXPERIMENT_DEFAULTS, **cfg.experiment}
        cfg.validate()
        return cfg

    def validate(self) -> None:
        from .bench import ENV_IDS

        if self.env not in ENV_IDS:
            raise ConfigError(f"env must be one of {ENV_IDS}")
        ex = self.experiment
        seed = ex["seed"]
        if not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        for key in ("rollouts", "n_ocps", "window"):
            if not isinstance(ex[key], int) or ex[key] < 0:
                raise ConfigError(f"experiment.{key} must be a non-negative integer")
        if ex["window"] < 1:
            raise ConfigError("experiment.window must be positive")
        if ex["steps"] is not None and (not isinstance(ex["steps"], int) or ex["steps"] < 0):
            raise ConfigError("experiment.steps must be a non-negative integer")
        b = ex["budget"]
        if b is not None and (not isinstance(b, (int, float)) or b < 0):
            raise ConfigError("experiment.budget must be a non-negative number")
        N = self.ocp.get("N")
        if N is not None and (not isinstance(N, int) or N < 1):
            raise ConfigError("ocp.N must be a positive integer")
        gap = self.solver.get("gap_tol")
        if gap is not None and gap < 0:
            raise ConfigError("solver.gap_tol must be non-negative")
        w = self.lnms.get("weights")
        if w is not None and (np.ndim(w) != 1 or np.any(np.asarray(w, dtype=float) <= 0)):
            raise ConfigError("lnms.weights must be a list of positive numbers")

    def to_dict(self) -> dict:
        return {
            "env": self.env, "system": self.system, "ocp": self.ocp, "lnms": self.lnms,
            "solver": self.solver, "experiment": self.experiment, "out": self.out,
        }

    def environment(self):
        ex = self.experiment
        try:
            return make_environment(
                self.env, self.system,
                **self.ocp, **self.solver,
                region=ex["region"], weights=self.lnms.get("weights"),
                max_steps=ex["steps"], convergence_eps=ex["convergence_eps"],
            )
        except TypeError as exc:
            raise ConfigError(f"bad system parameters: {exc}") from exc


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return RunConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# commands


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_store(cfg: RunConfig, env, path):
    path = path or cfg.experiment.get("store") or str(Path(cfg.out) / "store.jsonl")
    return SampleStore.load_jsonl(path, env.weights, cfg.lnms.get("dedup", True)), path


def cmd_run(cfg: RunConfig, strip_timing: bool = False) -> int:
    env = cfg.environment()
    out = Path(cfg.out)
    seed_store = cfg.lnms.get("seed_store")
    dedup = cfg.lnms.get("dedup", True)
    if seed_store:
        store = SampleStore.load_jsonl(seed_store, env.weights, dedup)
    else:
        store = SampleStore(env.system.n_x, env.weights, dedup)
    ctl = LnmsController(env.ocp, store, env.bnb_config, keep_records=False)
    rng = np.random.default_rng(cfg.experiment["seed"])
    lo, hi = env.region
    for i in range(cfg.experiment["rollouts"]):
        x0 = rng.uniform(lo, hi)
        rec = closed_loop_rollout(ctl, x0, env.max_steps, env.convergence_eps)
        _dump(out / f"rollout_{i:03d}.json", rec.to_dict(strip_timing))
        print(f"rollout {i}: {rec.terminated.value} steps={rec.n_steps} "
              f"mip={sum(rec.mip_invoked)} final_norm={np.linalg.norm(rec.states[-1]):.3g}")
    store.save_jsonl(out / "store.jsonl")
    print(f"store: {len(store)} samples, {ctl.stats.mip_invocations}/{ctl.stats.steps} MIP steps")
    return EXIT_OK


def cmd_improve(cfg: RunConfig, store_path=None, budget=None, strip_timing: bool = False) -> int:
    env = cfg.environment()
    store, path = _load_store(cfg, env, store_path)
    budget = cfg.experiment["budget"] if budget is None else budget
    report = improve_samples(store, env.ocp, budget, gap_tol=env.bnb_config.gap_tol)
    out = Path(cfg.out)
    report.write_csv(out / "improvement.csv")
    store.save_jsonl(out / "store_improved.jsonl")
    print(f"improved {path}: {report.n_changed} of {len(report.rows)} labels changed, "
          f"{len(report.skipped)} skipped")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, which: str, n=None, strip_timing: bool = False) -> int:
    env = cfg.environment()
    ex = cfg.experiment
    out = Path(cfg.out)
    if which == "wallclock":
        table = run_wallclock_comparison(env, ex["n_ocps"] if n is None else n, ex["seed"])
        _dump(out / "wallclock.json", table.to_dict(strip_timing))
        table.write_csv(out / "wallclock.csv", strip_timing)
        print(f"wallclock: lnms {table.lnms_seconds:.3f}s, mip {table.mip_seconds:.3f}s, ratio {table.ratio:.2f}")
    else:
        report = run_mip_fraction_experiment(
            env, ex["rollouts"] if n is None else n, seed=ex["seed"], window=ex["window"],
            max_total_steps=ex["max_total_steps"], dedup=cfg.lnms.get("dedup", True),
        )
        _dump(out / "mip_fraction.json", report.to_dict(strip_timing))
        report.write_curve_csv(out / "mip_fraction_curve.csv")
        trend = "none" if report.spearman_rho is None else f"rho={report.spearman_rho:.3f} p={report.spearman_p:.3g}"
        print(f"mip-fraction: {report.mip_invocations}/{report.n_steps} MIP steps, "
              f"first window {report.first_window}, final window {report.final_window}, trend {trend}")
    return EXIT_OK


def cmd_partition(cfg: RunConfig, store_path=None, resolution=None, strip_timing: bool = False) -> int:
    env = cfg.environment()
    store, _ = _load_store(cfg, env, store_path)
    ex = cfg.experiment
    res = ex["resolution"] if resolution is None else resolution
    grid = export_partition_grid(
        store, res, ex["bounds"], env.ocp, bool(ex["u0"]), Path(cfg.out) / "partition.csv"
    )
    print(f"partition: {grid.n_regions} regions over {len(grid.region_id)} grid points")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _common(parser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="JSON run config")
    parser.add_argument("--out", default=d, help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, default=d, help="unsigned 64-bit seed")
    parser.add_argument("--strip-timing", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="zero timing fields in exported files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lnms", description="Nearest-neighbor mode-sequence hybrid MPC")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="closed-loop rollouts with the learning controller")
    _common(p, suppress=True)
    p.add_argument("--rollouts", type=int)
    p.add_argument("--steps", type=int, help="max steps per rollout")

    p = sub.add_parser("improve", help="relabel a stored dataset")
    _common(p, suppress=True)
    p.add_argument("--store")
    p.add_argument("--budget", type=float, help="seconds per sample")

    p = sub.add_parser("bench", help="MIP-fraction or wall-clock experiment")
    _common(p, suppress=True)
    p.add_argument("--which", required=True, choices=["mip-fraction", "wallclock"])
    p.add_argument("--n", type=int, help="rollouts (mip-fraction) or OCPs (wallclock)")

    p = sub.add_parser("partition", help="export the nearest-neighbor partition on a grid")
    _common(p, suppress=True)
    p.add_argument("--store")
    p.add_argument("--resolution", type=int)
    return parser


def _setup_logging():
    level = os.environ.get("LNMS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.out = args.out
        if args.seed is not None:
            cfg.experiment["seed"] = args.seed
        if args.command == "run":
            if args.rollouts is not None:
                cfg.experiment["rollouts"] = args.rollouts
            if args.steps is not None:
                cfg.experiment["steps"] = args.steps
        cfg.validate()
        cfg.environment()
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "config.json", cfg.to_dict())
    except (ConfigError, InvalidParameter, InvalidRegion) as exc:
        print(f"lnms: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"lnms: error: cannot prepare output directory: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "run":
            return cmd_run(cfg, args.strip_timing)
        if args.command == "improve":
            return cmd_improve(cfg, args.store, args.budget, args.strip_timing)
        if args.command == "bench":
            return cmd_bench(cfg, args.which, args.n, args.strip_timing)
        return cmd_partition(cfg, args.store, args.resolution, args.strip_timing)
    except (ConfigError, InvalidRegion) as exc:
        print(f"lnms: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HybridLnmsError, OSError, ValueError) as exc:
        print(f"lnms: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
