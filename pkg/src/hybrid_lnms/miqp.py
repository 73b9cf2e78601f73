"""Branch-and-bound for the big-M mixed-integer formulation of a hybrid OCP.

Nodes restrict the set of modes allowed at each horizon step. A node's
relaxation keeps the mode indicators of undecided steps in [0, 1]; a node
whose steps are all decided is exactly the fixed-mode QP. Nodes are
explored best-first by parent bound (deeper first on ties), branching on
the most fractional indicator of the earliest undecided step.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleProblem, TooManySequences
from .ocp import (
    HybridOcp,
    ModeSequence,
    as_mode_sequence,
    assemble_fixed_mode_ocp,
    assemble_relaxation,
    compute_big_m,
    initial_mode,
    reachable_modes,
    unpack_trajectory,
)
from .pwa_systems import active_mode
from .qp_core import QpConfig, QpSolution, QpStatus, solve_qp

__all__ = [
    "BnbConfig",
    "HybridOcp",
    "MiqpSolution",
    "MiqpStatus",
    "compute_big_m",
    "enumerate_exhaustive",
    "solve_bnb",
    "solve_fixed_modes",
]

logger = logging.getLogger(__name__)

INTEGRALITY_TOL = 1e-6
MAX_ENUMERATION = 10**6


class MiqpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    FEASIBLE_EARLY_STOP = "FeasibleEarlyStop"
    INFEASIBLE = "Infeasible"
    TIME_LIMIT = "TimeLimit"


@dataclass
class BnbConfig:
    """Search limits. ``time_limit``/``node_limit`` of None mean unlimited."""

    time_limit: float | None = None
    gap_tol: float = 1e-6
    stop_at_first_feasible: bool = False
    node_limit: int | None = None
    # round relaxations to candidate sequences to find incumbents early
    rounding_heuristic: bool = True
    # drop modes that interval reachability from x_p rules out
    presolve: bool = True
    record_tree: bool = False

    def __post_init__(self):
        if self.time_limit is not None and self.time_limit < 0:
            raise ValueError("time_limit must be non-negative")
        if self.node_limit is not None and self.node_limit < 0:
            raise ValueError("node_limit must be non-negative")
        if self.gap_tol < 0:
            raise ValueError("gap_tol must be non-negative")


@dataclass
class MiqpSolution:
    modes: ModeSequence | None
    u: np.ndarray | None
    x: np.ndarray | None
    objective: float
    gap: float
    status: MiqpStatus
    nodes_explored: int = 0
    solve_time: float = 0.0
    warm_started: bool = False
    warm_start_feasible: bool = False
    qp_solves: int = 0
    # (node id, parent id, relaxation value) when BnbConfig.record_tree is set
    tree: list = field(default_factory=list, repr=False)

    @property
    def feasible(self) -> bool:
        return self.modes is not None

    def to_record(self) -> dict:
        return {
            "status": self.status.value,
            "objective": None if not np.isfinite(self.objective) else self.objective,
            "gap": None if not np.isfinite(self.gap) else self.gap,
            "nodes": self.nodes_explored,
            "time_s": self.solve_time,
            "warm_started": self.warm_started,
            "warm_start_feasible": self.warm_start_feasible,
        }


def solve_fixed_modes(ocp: HybridOcp, modes, x_p, qp_config: QpConfig | None = None) -> QpSolution:
    return solve_qp(assemble_fixed_mode_ocp(ocp, modes, x_p), qp_config)


@dataclass
class _Incumbent:
    modes: ModeSequence
    objective: float
    qp: QpSolution


class _Search:
    def __init__(self, ocp, x_p, config, qp_config):
        self.ocp = ocp
        self.x_p = np.asarray(x_p, dtype=float).reshape(-1)
        self.config = config
        self.qp_config = qp_config
        self.incumbent: _Incumbent | None = None
        self.tried: dict[ModeSequence, float] = {}
        self.qp_solves = 0

    def evaluate(self, seq: ModeSequence) -> bool:
        """Solve the fixed-mode QP of ``seq``; return True when it improves the incumbent."""
        if seq in self.tried:
            return False
        sol = solve_fixed_modes(self.ocp, seq, self.x_p, self.qp_config)
        self.qp_solves += 1
        obj = sol.objective if sol.status is QpStatus.OPTIMAL else np.inf
        self.tried[seq] = obj
        if sol.status is QpStatus.MAX_ITER:
            logger.warning("fixed-mode QP for %s not certified; treated as infeasible", seq)
        if np.isfinite(obj) and (self.incumbent is None or obj < self.incumbent.objective):
            self.incumbent = _Incumbent(seq, obj, sol)
            return True
        return False

    def prune_threshold(self) -> float:
        if self.incumbent is None:
            return np.inf
        inc = self.incumbent.objective
        return inc - max(self.config.gap_tol, 1e-9) * max(1.0, abs(inc))


def _candidates(ocp, x_p, allowed, relax, z) -> list[ModeSequence]:
    """Integer sequences suggested by a fractional relaxation point."""
    N = ocp.N
    by_argmax = []
    for t in range(N):
        if relax.indicator_cols[t] is None:
            by_argmax.append(allowed[t][0])
        else:
            pairs = relax.indicator_cols[t]
            by_argmax.append(max(pairs, key=lambda mc: z[mc[1]])[0])
    out = [tuple(by_argmax)]
    # modes the plant would pick along the relaxed state trajectory
    u, x = unpack_trajectory(ocp, x_p, z[: ocp.n_z])
    sim = []
    for t in range(N):
        try:
            m = active_mode(ocp.system, x[t], u[t])
        except Exception:
            m = by_argmax[t]
        sim.append(m if m in allowed[t] else by_argmax[t])
    sim = tuple(sim)
    if sim != out[0]:
        out.append(sim)
    return out


def _branch_choice(relax, z):
    """Earliest undecided step with a fractional indicator, and its most fractional mode."""
    for t, pairs in enumerate(relax.indicator_cols):
        if pairs is None:
            continue
        frac = [(min(z[c], 1.0 - z[c]), m) for m, c in pairs]
        best = max(frac, key=lambda fm: fm[0])
        if best[0] > INTEGRALITY_TOL:
            return t, best[1]
    return None


def _rounded(relax, allowed, z) -> ModeSequence:
    seq = []
    for t, pairs in enumerate(relax.indicator_cols):
        if pairs is None:
            seq.append(allowed[t][0])
        else:
            seq.append(max(pairs, key=lambda mc: z[mc[1]])[0])
    return tuple(seq)


def solve_bnb(
    ocp: HybridOcp,
    x_p,
    warm_start=None,
    config: BnbConfig | None = None,
    qp_config: QpConfig | None = None,
) -> MiqpSolution:
    """Solve the hybrid OCP from ``x_p`` by branch and bound.

    A feasible ``warm_start`` sequence becomes the incumbent before any node
    is explored; with ``stop_at_first_feasible`` it is returned at once.
    Raises ``InfeasibleProblem`` when the search proves no sequence is
    feasible. Exhausted time or node budgets return status ``TimeLimit``
    with the best incumbent (``modes`` is None if none was found).
    """
    cfg = config or BnbConfig()
    t0 = time.perf_counter()
    sys = ocp.system
    N = ocp.N
    search = _Search(ocp, x_p, cfg, qp_config)
    x_p = search.x_p

    root_allowed = [tuple(range(sys.n_modes))] * N
    if cfg.presolve:
        reach = reachable_modes(ocp, x_p)
        if reach is None:
            raise InfeasibleProblem(f"no mode sequence can satisfy the bounds from x_p={x_p.tolist()}")
        root_allowed = reach

    warm_feasible = False
    if warm_start is not None:
        seq = as_mode_sequence(warm_start, N, sys.n_modes)
        # a sequence through an unreachable mode is infeasible without a QP
        if all(m in a for m, a in zip(seq, root_allowed)):
            warm_feasible = search.evaluate(seq)

    def result(status, bound, nodes):
        inc = search.incumbent
        elapsed = time.perf_counter() - t0
        if inc is None:
            return MiqpSolution(None, None, None, np.inf, np.inf, status, nodes, elapsed,
                                warm_start is not None, warm_feasible, search.qp_solves, tree)
        u, x = unpack_trajectory(ocp, x_p, inc.qp.z)
        gap = max(0.0, (inc.objective - bound) / max(1.0, abs(inc.objective)))
        return MiqpSolution(inc.modes, u, x, inc.objective, gap, status, nodes, elapsed,
                            warm_start is not None, warm_feasible, search.qp_solves, tree)

    tree: list = []
    if warm_feasible and cfg.stop_at_first_feasible:
        return result(MiqpStatus.FEASIBLE_EARLY_STOP, -np.inf, 0)

    first = initial_mode(sys, x_p)
    if first is not None:
        root_allowed[0] = (first,)
    counter = itertools.count()
    # (bound, -depth, tiebreak, allowed, parent id)
    heap = [(-np.inf, 0, next(counter), tuple(root_allowed), -1)]
    nodes = 0
    while heap:
        bound, neg_depth, node_id, allowed, parent = heapq.heappop(heap)
        if bound >= search.prune_threshold():
            continue
        if search.incumbent is not None:
            lower = min([bound] + [h[0] for h in heap])
            inc = search.incumbent.objective
            if (inc - lower) / max(1.0, abs(inc)) <= cfg.gap_tol:
                heapq.heappush(heap, (bound, neg_depth, node_id, allowed, parent))
                return result(MiqpStatus.OPTIMAL, lower, nodes)
        if (cfg.time_limit is not None and time.perf_counter() - t0 >= cfg.time_limit) or (
            cfg.node_limit is not None and nodes >= cfg.node_limit
        ):
            lower = min([bound] + [h[0] for h in heap])
            return result(MiqpStatus.TIME_LIMIT, lower, nodes)

        nodes += 1
        if all(len(a) == 1 for a in allowed):
            seq = tuple(a[0] for a in allowed)
            search.evaluate(seq)
            if cfg.record_tree:
                tree.append((node_id, parent, search.tried.get(seq, np.inf)))
            if search.incumbent is not None and cfg.stop_at_first_feasible:
                return result(MiqpStatus.FEASIBLE_EARLY_STOP, min([bound] + [h[0] for h in heap]), nodes)
            continue

        relax = assemble_relaxation(ocp, x_p, allowed)
        sol = solve_qp(relax.qp, qp_config)
        search.qp_solves += 1
        if sol.status is QpStatus.INFEASIBLE:
            if cfg.record_tree:
                tree.append((node_id, parent, np.inf))
            continue
        if sol.status is QpStatus.OPTIMAL:
            value = sol.objective
            if cfg.record_tree:
                tree.append((node_id, parent, value))
            if value >= search.prune_threshold():
                continue
            z = sol.z
            choice = _branch_choice(relax, z)
            if choice is None:
                # integral relaxation: its rounding is the node's optimum
                search.evaluate(_rounded(relax, allowed, z))
                if search.incumbent is not None and cfg.stop_at_first_feasible:
                    return result(MiqpStatus.FEASIBLE_EARLY_STOP, min([bound] + [h[0] for h in heap]), nodes)
                continue
            if cfg.rounding_heuristic:
                for cand in _candidates(ocp, x_p, allowed, relax, z):
                    search.evaluate(cand)
                if search.incumbent is not None and cfg.stop_at_first_feasible:
                    return result(MiqpStatus.FEASIBLE_EARLY_STOP, min([bound] + [h[0] for h in heap]), nodes)
            t_branch, m_branch = choice
        else:
            # uncertified relaxation: keep the parent's bound and split the earliest open step
            logger.debug("relaxation not certified at node %d; branching without a bound", node_id)
            value = bound
            t_branch = next(t for t, a in enumerate(allowed) if len(a) > 1)
            m_branch = allowed[t_branch][0]
        fixed = list(allowed)
        fixed[t_branch] = (m_branch,)
        rest = list(allowed)
        rest[t_branch] = tuple(m for m in allowed[t_branch] if m != m_branch)
        depth = -neg_depth + 1
        heapq.heappush(heap, (value, -depth, next(counter), tuple(fixed), node_id))
        heapq.heappush(heap, (value, -depth, next(counter), tuple(rest), node_id))

    if search.incumbent is None:
        raise InfeasibleProblem(f"no feasible mode sequence from x_p={x_p.tolist()}")
    return result(MiqpStatus.OPTIMAL, search.incumbent.objective, nodes)


def enumerate_exhaustive(ocp: HybridOcp, x_p, qp_config: QpConfig | None = None) -> MiqpSolution:
    """Solve the fixed-mode QP of every mode sequence and keep the best (test oracle)."""
    sys = ocp.system
    count = sys.n_modes**ocp.N
    if count > MAX_ENUMERATION:
        raise TooManySequences(f"{count} sequences exceed the enumeration limit {MAX_ENUMERATION}")
    t0 = time.perf_counter()
    x_p = np.asarray(x_p, dtype=float).reshape(-1)
    best = None
    solves = 0
    for seq in itertools.product(range(sys.n_modes), repeat=ocp.N):
        sol = solve_fixed_modes(ocp, seq, x_p, qp_config)
        solves += 1
        if sol.status is QpStatus.OPTIMAL and (best is None or sol.objective < best[1].objective):
            best = (seq, sol)
    elapsed = time.perf_counter() - t0
    if best is None:
        raise InfeasibleProblem(f"no feasible mode sequence from x_p={x_p.tolist()}")
    seq, sol = best
    u, x = unpack_trajectory(ocp, x_p, sol.z)
    return MiqpSolution(seq, u, x, sol.objective, 0.0, MiqpStatus.OPTIMAL, solves, elapsed, qp_solves=solves)
