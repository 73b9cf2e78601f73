"""Closed-loop experiments: rollouts, MIP-fraction curves, timing, partition exports."""

from __future__ import annotations

import csv
import enum
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import stats

from .errors import InfeasibleProblem, InvalidParameter, InvalidRegion, UnsupportedDimension
from .lnms import LnmsController, SampleStore
from .miqp import BnbConfig, solve_bnb, solve_fixed_modes
from .ocp import HybridOcp, unpack_trajectory
from .pwa_systems import (
    PwaSystem,
    build_cart_wall,
    build_elastic_pendulum,
    compute_invariant_set,
    lqr_gain,
    lqr_terminal_constraints,
    simulate_step,
    solve_dare,
)
from .qp_core import QpConfig, QpStatus

__all__ = [
    "BenchReport",
    "ENV_IDS",
    "Environment",
    "ExactMpcController",
    "PartitionGrid",
    "RolloutRecord",
    "Termination",
    "TimingTable",
    "closed_loop_rollout",
    "export_partition_grid",
    "make_environment",
    "mip_fraction_curve",
    "rollout_consistency",
    "run_mip_fraction_experiment",
    "run_wallclock_comparison",
]

logger = logging.getLogger(__name__)

ENV_IDS = ("cart1", "cart2", "pendulum")


# ---------------------------------------------------------------------------
# environments


@dataclass
class Environment:
    env_id: str
    system: PwaSystem
    ocp: HybridOcp
    region: tuple[np.ndarray, np.ndarray]
    weights: np.ndarray
    bnb_config: BnbConfig
    max_steps: int = 1000
    convergence_eps: float = 0.01


_DEFAULTS = {
    "cart1": dict(N=10, R=0.001, beta=1000.0, region=([0.1, -10.0], [0.75, 10.0]),
                  time_limit=None, stop_at_first_feasible=False),
    "cart2": dict(N=25, R=0.001, beta=1000.0, region=([-0.75, -10.0], [0.75, 10.0]),
                  time_limit=5.0, stop_at_first_feasible=False),
    "pendulum": dict(N=10, R=1.0, beta=1.0, region=([-0.2, -1.0], [0.2, 1.0]),
                     time_limit=None, stop_at_first_feasible=False),
}


def _key(M) -> tuple:
    return tuple(map(tuple, np.asarray(M).tolist()))


@lru_cache(maxsize=8)
def _terminal_set(system_json: str, Q: tuple, R: tuple):
    """LQR invariant set of the first mode, cached since it costs a few LPs per row."""
    system = PwaSystem.from_json(system_json)
    m0 = system.modes[0]
    K = lqr_gain(m0.A, m0.B, np.array(Q), np.array(R))
    return compute_invariant_set(m0.A - m0.B @ K, lqr_terminal_constraints(system, K))


def make_environment(env_id: str, system_params: dict | None = None, **overrides) -> Environment:
    """Build one of the preset environments.

    Args:
        env_id: ``cart1``, ``cart2`` or ``pendulum``.
        system_params: keyword overrides for the system builder.
        **overrides: any of ``N``, ``Q``, ``R``, ``beta``, ``big_M``,
            ``region``, ``weights``, ``time_limit``, ``gap_tol``,
            ``stop_at_first_feasible``, ``node_limit``, ``max_steps``,
            ``convergence_eps``.
    """
    if env_id not in ENV_IDS:
        raise InvalidParameter(f"unknown environment {env_id!r}; expected one of {ENV_IDS}")
    known = {"N", "Q", "R", "beta", "big_M", "region", "weights", "time_limit", "gap_tol",
             "stop_at_first_feasible", "node_limit", "max_steps", "convergence_eps"}
    unknown = set(overrides) - known
    if unknown:
        raise InvalidParameter(f"unknown environment options: {sorted(unknown)}")
    p = dict(_DEFAULTS[env_id])
    p.update({k: v for k, v in overrides.items() if v is not None})
    sp = dict(system_params or {})
    if env_id == "cart1":
        system = build_cart_wall(1, **sp)
    elif env_id == "cart2":
        sp.setdefault("u_max", 10.0)
        system = build_cart_wall(2, **sp)
    else:
        system = build_elastic_pendulum(**sp)

    n_x, n_u = system.n_x, system.n_u
    Q = np.eye(n_x) if p.get("Q") is None else np.atleast_2d(np.asarray(p["Q"], dtype=float))
    R = np.atleast_2d(np.asarray(p["R"], dtype=float))
    if R.size == 1:
        R = float(R[0, 0]) * np.eye(n_u)
    m0 = system.modes[0]
    P = float(p["beta"]) * solve_dare(m0.A, m0.B, Q, R)
    terminal = None
    if env_id == "pendulum":
        terminal = _terminal_set(system.to_json(), _key(Q), _key(R))
    ocp = HybridOcp(system, int(p["N"]), Q, R, P, p.get("big_M"), terminal)
    region = validate_region(system, p["region"])
    # default metric normalizes each coordinate by its bound
    weights = 1.0 / system.x_max**2 if p.get("weights") is None else np.asarray(p["weights"], dtype=float)
    cfg = BnbConfig(
        time_limit=p.get("time_limit"),
        gap_tol=p.get("gap_tol", 1e-6),
        stop_at_first_feasible=bool(p.get("stop_at_first_feasible", False)),
        node_limit=p.get("node_limit"),
    )
    return Environment(env_id, system, ocp, region, weights, cfg,
                       int(p.get("max_steps", 1000)), float(p.get("convergence_eps", 0.01)))


def validate_region(system: PwaSystem, region) -> tuple[np.ndarray, np.ndarray]:
    """Check a sampling box ``(lo, hi)`` against the system's state bounds."""
    try:
        lo, hi = (np.asarray(v, dtype=float).reshape(-1) for v in region)
    except (TypeError, ValueError) as exc:
        raise InvalidRegion(f"region must be a pair (lo, hi): {exc}") from exc
    if lo.shape != (system.n_x,) or hi.shape != (system.n_x,):
        raise InvalidRegion(f"region bounds must have length {system.n_x}")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))) or np.any(lo > hi):
        raise InvalidRegion("region needs finite bounds with lo <= hi")
    if np.any(lo < system.x_min) or np.any(hi > system.x_max):
        raise InvalidRegion("region leaves the state bounds")
    return lo, hi


class ExactMpcController:
    """Hybrid MPC that solves the full MIQP from scratch at every step."""

    def __init__(self, ocp: HybridOcp, config: BnbConfig | None = None, qp_config: QpConfig | None = None):
        self.ocp = ocp
        self.config = config or BnbConfig()
        self.qp_config = qp_config
        self.solutions = []

    def control_step(self, x_p, config: BnbConfig | None = None):
        t0 = time.perf_counter()
        sol = solve_bnb(self.ocp, x_p, None, config or self.config, self.qp_config)
        if not sol.feasible:
            raise InfeasibleProblem(f"no feasible sequence found ({sol.status.value})")
        self.solutions.append(sol)
        info = {"mip_invoked": True, "solve_time": time.perf_counter() - t0, "x_next_pred": sol.x[1]}
        return sol.u[0].copy(), sol.modes, info


# ---------------------------------------------------------------------------
# rollouts


class Termination(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_STEPS = "MaxSteps"
    INFEASIBLE = "Infeasible"


@dataclass
class RolloutRecord:
    x0: np.ndarray
    states: np.ndarray  # (T + 1, n_x)
    inputs: np.ndarray  # (T, n_u)
    modes: list[int]
    mip_invoked: list[bool]
    solve_times: list[float]
    terminated: Termination

    @property
    def n_steps(self) -> int:
        return len(self.modes)

    def to_dict(self, strip_timing: bool = False) -> dict:
        return {
            "x0": self.x0.tolist(),
            "states": self.states.tolist(),
            "inputs": self.inputs.tolist(),
            "modes": list(self.modes),
            "mip_invoked": [bool(b) for b in self.mip_invoked],
            "solve_time_s": [0.0 if strip_timing else round(t, 3) for t in self.solve_times],
            "terminated": self.terminated.value,
        }


def _step_info(rec):
    if isinstance(rec, dict):
        return rec["mip_invoked"], rec["solve_time"]
    return rec.mip_invoked, rec.solve_time


def closed_loop_rollout(controller, x0, max_steps: int = 1000, convergence_eps: float = 0.01) -> RolloutRecord:
    """Run ``controller`` in closed loop on its system until convergence or ``max_steps``.

    An infeasible OCP ends the rollout with ``Termination.INFEASIBLE``.
    """
    system = controller.ocp.system
    x = np.asarray(x0, dtype=float).reshape(-1).copy()
    states, inputs, modes, mips, times = [x.copy()], [], [], [], []
    terminated = Termination.MAX_STEPS
    for _ in range(max_steps + 1):
        if np.linalg.norm(x) < convergence_eps:
            terminated = Termination.CONVERGED
            break
        if len(modes) == max_steps:
            break
        try:
            u, _, rec = controller.control_step(x)
        except InfeasibleProblem:
            terminated = Termination.INFEASIBLE
            break
        x, mode = simulate_step(system, x, u)
        mip, t = _step_info(rec)
        states.append(x.copy())
        inputs.append(u)
        modes.append(mode)
        mips.append(bool(mip))
        times.append(t)
    n_u = system.n_u
    return RolloutRecord(
        np.asarray(x0, dtype=float).reshape(-1), np.array(states),
        np.array(inputs).reshape(-1, n_u), modes, mips, times, terminated,
    )


def rollout_consistency(record: RolloutRecord, system: PwaSystem) -> float:
    """Largest deviation between recorded successors and a replay through the dynamics."""
    err = 0.0
    for t in range(record.n_steps):
        nxt, _ = simulate_step(system, record.states[t], record.inputs[t])
        err = max(err, float(np.max(np.abs(nxt - record.states[t + 1]))))
    return err


# ---------------------------------------------------------------------------
# MIP-fraction experiment


def mip_fraction_curve(flags, window: int = 100) -> np.ndarray:
    """Fraction of MIP steps in each length-``window`` sliding window (stride 1)."""
    flags = np.asarray(flags, dtype=float)
    if flags.size == 0:
        return np.zeros(0)
    if flags.size < window:
        return np.array([flags.mean()])
    c = np.concatenate([[0.0], np.cumsum(flags)])
    return (c[window:] - c[:-window]) / window


@dataclass
class BenchReport:
    env_id: str
    config: dict
    window: int
    curve: list[float] = field(default_factory=list)
    spearman_rho: float | None = None
    spearman_p: float | None = None
    n_rollouts: int = 0
    n_steps: int = 0
    mip_invocations: int = 0
    store_size: int = 0
    terminations: dict = field(default_factory=dict)
    lnms_seconds: float = 0.0
    rollout_seconds: list[float] = field(default_factory=list)
    rollouts: list[RolloutRecord] = field(default_factory=list, repr=False)

    @property
    def first_window(self) -> float | None:
        return self.curve[0] if self.curve else None

    @property
    def final_window(self) -> float | None:
        return self.curve[-1] if self.curve else None

    def to_dict(self, strip_timing: bool = False) -> dict:
        return {
            "env_id": self.env_id,
            "config": self.config,
            "window": self.window,
            "curve": self.curve,
            "first_window": self.first_window,
            "final_window": self.final_window,
            "spearman_rho": self.spearman_rho,
            "spearman_p": self.spearman_p,
            "n_rollouts": self.n_rollouts,
            "n_steps": self.n_steps,
            "mip_invocations": self.mip_invocations,
            "store_size": self.store_size,
            "terminations": self.terminations,
            "timing": {
                "lnms_s": 0.0 if strip_timing else round(self.lnms_seconds, 3),
                "rollout_s": [0.0 if strip_timing else round(t, 3) for t in self.rollout_seconds],
            },
        }

    def to_json(self, strip_timing: bool = False) -> str:
        return json.dumps(self.to_dict(strip_timing), indent=2)

    def write_curve_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["window_index", "mip_fraction"])
            for i, v in enumerate(self.curve):
                wr.writerow([i, repr(float(v))])


def _env(env) -> Environment:
    return env if isinstance(env, Environment) else make_environment(env)


def _drive(env: Environment, controller, draw, n_rollouts: int, max_total_steps: int | None):
    """Roll out from ``draw()`` states until ``n_rollouts`` are done or the step budget runs out."""
    rollouts, steps = [], 0
    for _ in range(n_rollouts):
        remaining = env.max_steps if max_total_steps is None else min(env.max_steps, max_total_steps - steps)
        if remaining <= 0:
            break
        rec = closed_loop_rollout(controller, draw(), remaining, env.convergence_eps)
        rollouts.append(rec)
        steps += rec.n_steps
    return rollouts


def _worker(env: Environment, states: np.ndarray, max_total_steps: int | None, dedup: bool):
    store = SampleStore(env.system.n_x, env.weights, dedup=dedup)
    ctl = LnmsController(env.ocp, store, env.bnb_config, keep_records=False)
    it = iter(states)
    return _drive(env, ctl, lambda: next(it), len(states), max_total_steps), len(store)


def run_mip_fraction_experiment(
    env,
    n_rollouts: int,
    region=None,
    seed: int = 0,
    window: int = 100,
    max_total_steps: int | None = None,
    controller: LnmsController | None = None,
    dedup: bool = True,
    workers: int = 1,
) -> BenchReport:
    """Roll out LNMS from uniform random initial states with one shared store.

    Rollouts stop early once ``max_total_steps`` control steps have been
    taken. The curve holds the MIP fraction of every ``window``-step window
    over the concatenated step sequence; its trend is summarized by the
    Spearman correlation against the window index.

    With ``workers > 1`` the initial states are split into contiguous chunks,
    each rolled out in its own process with its own empty store and an even
    share of ``max_total_steps``. The reported curve is then the mean of the
    per-worker curves over their common length. This is a different
    experiment from the sequential one: every worker learns from scratch.
    """
    env = _env(env)
    if n_rollouts < 0:
        raise InvalidParameter("n_rollouts must be non-negative")
    if workers < 1:
        raise InvalidParameter("workers must be at least 1")
    if workers > 1 and controller is not None:
        raise InvalidParameter("a shared controller cannot be used with several workers")
    lo, hi = validate_region(env.system, env.region if region is None else region)
    rng = np.random.default_rng(seed)
    config = {
        "n_rollouts": n_rollouts, "region": [lo.tolist(), hi.tolist()], "seed": seed,
        "window": window, "max_total_steps": max_total_steps, "N": env.ocp.N,
        "max_steps": env.max_steps, "convergence_eps": env.convergence_eps, "workers": workers,
    }
    report = BenchReport(env.env_id, config, window)

    if workers == 1:
        if controller is None:
            store = SampleStore(env.system.n_x, env.weights, dedup=dedup)
            controller = LnmsController(env.ocp, store, env.bnb_config, keep_records=False)
        rollouts = _drive(env, controller, lambda: rng.uniform(lo, hi), n_rollouts, max_total_steps)
        flags = [f for r in rollouts for f in r.mip_invoked]
        curve = mip_fraction_curve(flags, window)
        report.store_size = len(controller.store)
    else:
        states = rng.uniform(lo, hi, size=(n_rollouts, lo.size))
        chunks = [c for c in np.array_split(states, workers) if len(c)]
        share = None if max_total_steps is None else max_total_steps // max(1, len(chunks))
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(_worker, [env] * len(chunks), chunks, [share] * len(chunks),
                                    [dedup] * len(chunks)))
        rollouts = [r for part, _ in results for r in part]
        curves = [mip_fraction_curve([f for r in part for f in r.mip_invoked], window) for part, _ in results]
        curves = [c for c in curves if c.size]
        n = min((c.size for c in curves), default=0)
        curve = np.mean([c[:n] for c in curves], axis=0) if n else np.zeros(0)
        report.store_size = sum(size for _, size in results)

    for rec in rollouts:
        report.rollouts.append(rec)
        report.rollout_seconds.append(float(sum(rec.solve_times)))
        key = rec.terminated.value
        report.terminations[key] = report.terminations.get(key, 0) + 1
    report.n_rollouts = len(rollouts)
    report.curve = [float(v) for v in curve]
    report.n_steps = sum(r.n_steps for r in rollouts)
    report.mip_invocations = int(sum(sum(r.mip_invoked) for r in rollouts))
    report.lnms_seconds = float(sum(report.rollout_seconds))
    if curve.size > 2 and np.ptp(curve) > 0:
        rho, p = stats.spearmanr(np.arange(curve.size), curve)
        report.spearman_rho, report.spearman_p = float(rho), float(p)
    return report


# ---------------------------------------------------------------------------
# wall-clock comparison


@dataclass
class TimingTable:
    env_id: str
    n_ocps: int
    lnms_seconds: float
    mip_seconds: float
    lnms_mip_invocations: int
    states: np.ndarray = field(repr=False, default=None)
    discarded: int = 0

    @property
    def ratio(self) -> float:
        return self.mip_seconds / self.lnms_seconds if self.lnms_seconds > 0 else float("nan")

    def to_dict(self, strip_timing: bool = False) -> dict:
        return {
            "env_id": self.env_id,
            "n_ocps": self.n_ocps,
            "lnms_s": 0.0 if strip_timing else round(self.lnms_seconds, 3),
            "mip_s": 0.0 if strip_timing else round(self.mip_seconds, 3),
            "ratio": 0.0 if strip_timing else round(self.ratio, 3),
            "lnms_mip_invocations": self.lnms_mip_invocations,
            "discarded_infeasible": self.discarded,
        }

    def write_csv(self, path, strip_timing: bool = False) -> None:
        d = self.to_dict(strip_timing)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(list(d))
            wr.writerow(list(d.values()))


def run_wallclock_comparison(
    env, n_ocps: int, seed: int = 0, region=None, max_draws: int | None = None, repeats: int = 1
) -> TimingTable:
    """Time LNMS with a persistent store against cold branch and bound.

    Initial states are drawn uniformly from the region; draws for which the
    cold solve proves infeasibility are discarded and redrawn. Both methods
    use the environment's branch-and-bound settings, so they differ only in
    the stored sequences LNMS reuses. Times cover solver calls only. With
    ``repeats > 1`` each pass is rerun from scratch (LNMS from an empty store)
    and the fastest run of each method is reported, as timeit does.
    """
    env = _env(env)
    if n_ocps < 0:
        raise InvalidParameter("n_ocps must be non-negative")
    if repeats < 1:
        raise InvalidParameter("repeats must be at least 1")
    lo, hi = validate_region(env.system, env.region if region is None else region)
    rng = np.random.default_rng(seed)
    max_draws = 50 * max(1, n_ocps) if max_draws is None else max_draws
    states, mip_s, discarded = [], 0.0, 0
    while len(states) < n_ocps:
        if len(states) + discarded >= max_draws:
            raise InvalidRegion(f"only {len(states)} feasible states in {max_draws} draws")
        x = rng.uniform(lo, hi)
        t0 = time.perf_counter()
        try:
            solve_bnb(env.ocp, x, None, env.bnb_config)
        except InfeasibleProblem:
            discarded += 1
            continue
        mip_s += time.perf_counter() - t0
        states.append(x)

    def cold_pass():
        total = 0.0
        for x in states:
            t0 = time.perf_counter()
            solve_bnb(env.ocp, x, None, env.bnb_config)
            total += time.perf_counter() - t0
        return total

    def lnms_pass():
        ctl = LnmsController(env.ocp, SampleStore(env.system.n_x, env.weights), env.bnb_config, keep_records=False)
        total = 0.0
        for x in states:
            t0 = time.perf_counter()
            ctl.control_step(x)
            total += time.perf_counter() - t0
        return total, ctl

    # interleave the passes so slow drift in machine speed hits both methods alike
    lnms_s, ctl = lnms_pass()
    for _ in range(repeats - 1):
        mip_s = min(mip_s, cold_pass())
        lnms_s = min(lnms_s, lnms_pass()[0])
    return TimingTable(env.env_id, n_ocps, float(lnms_s), mip_s, ctl.stats.mip_invocations,
                       np.array(states).reshape(-1, env.system.n_x), discarded)


# ---------------------------------------------------------------------------
# partition export


@dataclass
class PartitionGrid:
    x1: np.ndarray
    x2: np.ndarray
    region_id: np.ndarray
    u0: np.ndarray
    sequences: list[tuple]

    @property
    def n_regions(self) -> int:
        return len(self.sequences)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["x1", "x2", "region_id", "u0"])
            for a, b, r, u in zip(self.x1, self.x2, self.region_id, self.u0):
                wr.writerow([repr(float(a)), repr(float(b)), int(r), repr(float(u))])


def export_partition_grid(
    source,
    resolution=(50, 50),
    bounds=None,
    ocp: HybridOcp | None = None,
    with_u0: bool = False,
    path=None,
) -> PartitionGrid:
    """Label a regular grid with the nearest stored mode sequence.

    Args:
        source: a SampleStore or an LnmsController (whose store and OCP are used).
        resolution: grid points per dimension.
        bounds: ``(lo, hi)``; defaults to the bounding box of the stored states.
        ocp: needed for ``with_u0``; taken from the controller when omitted.
        with_u0: also solve the fixed-mode QP at each grid point (NaN where
            infeasible).
        path: optional CSV destination.

    Region ids are assigned to sequences in first-seen order, scanning x1
    fastest.
    """
    store = source.store if isinstance(source, LnmsController) else source
    if ocp is None and isinstance(source, LnmsController):
        ocp = source.ocp
    if store.n_x != 2:
        raise UnsupportedDimension("partition export is defined for 2-dimensional states only")
    if len(store) == 0:
        raise InvalidParameter("store is empty")
    if with_u0 and ocp is None:
        raise InvalidParameter("u0 export needs an OCP")
    nx, ny = (int(resolution), int(resolution)) if np.ndim(resolution) == 0 else (int(r) for r in resolution)
    if nx < 1 or ny < 1:
        raise InvalidParameter("resolution must be positive")
    if bounds is None:
        S = store.states
        lo, hi = S.min(axis=0), S.max(axis=0)
    else:
        lo, hi = (np.asarray(v, dtype=float).reshape(2) for v in bounds)
    g1 = np.linspace(lo[0], hi[0], nx)
    g2 = np.linspace(lo[1], hi[1], ny)
    ids: dict[tuple, int] = {}
    X1, X2, RID, U0 = [], [], [], []
    for b in g2:
        for a in g1:
            x = np.array([a, b])
            hit = store.query(x)
            rid = ids.setdefault(hit.modes, len(ids))
            u0 = np.nan
            if with_u0:
                sol = solve_fixed_modes(ocp, hit.modes, x)
                if sol.status is QpStatus.OPTIMAL:
                    u0 = float(unpack_trajectory(ocp, x, sol.z)[0][0, 0])
            X1.append(a)
            X2.append(b)
            RID.append(rid)
            U0.append(u0)
    grid = PartitionGrid(np.array(X1), np.array(X2), np.array(RID, dtype=int), np.array(U0), list(ids))
    if path is not None:
        grid.write_csv(path)
    return grid
