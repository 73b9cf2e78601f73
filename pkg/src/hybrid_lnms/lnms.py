"""Nearest-neighbor mode-sequence controller and offline relabeling.

The controller keeps a store of (state, mode sequence) samples. At each
step it predicts the mode sequence of the closest stored state, solves the
fixed-mode QP for it, and only falls back to branch and bound when that QP
is not feasible. Every solved step is added to the store.
"""

from __future__ import annotations

import csv
import json
import logging
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, InvalidParameter, NoConvergence, SkippedInfeasible
from .miqp import BnbConfig, MiqpSolution, MiqpStatus, solve_bnb, solve_fixed_modes
from .ocp import HybridOcp, ModeSequence, as_mode_sequence, reachable_modes, unpack_trajectory
from .qp_core import QpConfig, QpStatus

__all__ = [
    "ImprovementReport",
    "ImprovementRow",
    "LnmsController",
    "LnmsStats",
    "NnResult",
    "SampleStore",
    "StepRecord",
    "control_step",
    "improve_samples",
    "nn_query",
    "weighted_distance",
]

logger = logging.getLogger(__name__)

REBUILD_EVERY = 256
# relative slack when collecting tree candidates for exact re-ranking
_TIE_SLACK = 1e-9


def weighted_distance(a, b, w) -> float:
    """Weighted Euclidean distance ``sqrt(sum_i w_i (a_i - b_i)^2)``.

    Raises:
        DimensionMismatch: if the three vectors differ in length.
    """
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    w = np.asarray(w, dtype=float).reshape(-1)
    if not (a.shape == b.shape == w.shape):
        raise DimensionMismatch(f"shapes {a.shape}, {b.shape}, {w.shape} differ")
    return float(np.sqrt(np.sum(w * (a - b) ** 2)))


def _row_distances(X, x, w):
    return np.sqrt(np.sum(w * (X - x) ** 2, axis=1))


@dataclass(frozen=True)
class NnResult:
    modes: ModeSequence
    distance: float
    index: int


class SampleStore:
    """Samples of (state, mode sequence, objective) with exact weighted NN.

    Points are indexed by a k-d tree over ``sqrt(w)``-scaled coordinates
    that is rebuilt every ``rebuild_every`` insertions; newer points sit in
    an overflow list that is scanned linearly. Tree candidates near the
    best tree distance are re-ranked with :func:`weighted_distance`, so the
    result matches a linear scan, with the earliest insertion winning ties.

    Writes are serialized by a lock. Queries may run concurrently with each
    other but not with writes.
    """

    def __init__(self, n_x: int, weights=None, dedup: bool = True, rebuild_every: int = REBUILD_EVERY):
        if n_x < 1:
            raise InvalidParameter("n_x must be positive")
        w = np.ones(n_x) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
        if w.shape != (n_x,):
            raise DimensionMismatch(f"weights have shape {w.shape}, expected ({n_x},)")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise InvalidParameter("weights must be finite and strictly positive")
        if rebuild_every < 1:
            raise InvalidParameter("rebuild_every must be positive")
        self.n_x = n_x
        self.weights = w
        self.dedup = dedup
        self.rebuild_every = rebuild_every
        self._sqrt_w = np.sqrt(w)
        self._X = np.empty((0, n_x))
        self._modes: list[ModeSequence] = []
        self._objectives: list[float] = []
        self._tree = None
        self._n_tree = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._modes)

    @property
    def states(self) -> np.ndarray:
        return self._X[: len(self)].copy()

    @property
    def modes(self) -> list[ModeSequence]:
        return list(self._modes)

    @property
    def objectives(self) -> list[float]:
        return list(self._objectives)

    def sample(self, i: int) -> tuple[np.ndarray, ModeSequence, float]:
        return self._X[i].copy(), self._modes[i], self._objectives[i]

    def _check_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape != (self.n_x,):
            raise DimensionMismatch(f"state has shape {x.shape}, expected ({self.n_x},)")
        return x

    def add(self, x, modes, objective: float = float("nan")) -> int:
        """Insert a sample and return its index.

        With ``dedup`` an exact repeat of a stored state overwrites that
        sample's label instead of growing the store.
        """
        x = self._check_x(x)
        modes = tuple(int(m) for m in modes)
        with self._lock:
            if self.dedup and len(self):
                hit = self._query(x)
                if hit is not None and hit.distance == 0.0:
                    self._modes[hit.index] = modes
                    self._objectives[hit.index] = float(objective)
                    return hit.index
            n = len(self)
            if n == self._X.shape[0]:
                grown = np.empty((max(16, 2 * n), self.n_x))
                grown[:n] = self._X[:n]
                self._X = grown
            self._X[n] = x
            self._modes.append(modes)
            self._objectives.append(float(objective))
            if len(self) - self._n_tree >= self.rebuild_every:
                self._rebuild()
            return n

    def relabel(self, i: int, modes, objective: float) -> None:
        with self._lock:
            self._modes[i] = tuple(int(m) for m in modes)
            self._objectives[i] = float(objective)

    def _rebuild(self):
        n = len(self)
        self._tree = cKDTree(self._X[:n] * self._sqrt_w)
        self._n_tree = n

    def query(self, x) -> NnResult | None:
        """Exact nearest sample under the weighted metric, or None when empty."""
        return self._query(self._check_x(x))

    def _query(self, x) -> NnResult | None:
        n = len(self)
        if n == 0:
            return None
        best_d, best_i = np.inf, -1
        tree, n_tree = self._tree, self._n_tree
        if tree is not None and n_tree:
            xs = x * self._sqrt_w
            d_tree, _ = tree.query(xs)
            radius = d_tree * (1.0 + _TIE_SLACK) + 1e-12
            cand = np.asarray(tree.query_ball_point(xs, radius), dtype=int)
            if cand.size:
                dist = _row_distances(self._X[cand], x, self.weights)
                k = int(np.lexsort((cand, dist))[0])
                best_d, best_i = float(dist[k]), int(cand[k])
        if n > n_tree:
            dist = _row_distances(self._X[n_tree:n], x, self.weights)
            k = int(np.argmin(dist))
            if dist[k] < best_d:
                best_d, best_i = float(dist[k]), n_tree + k
        return NnResult(self._modes[best_i], best_d, best_i)

    # persistence

    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for i in range(len(self)):
                obj = self._objectives[i]
                rec = {
                    "x": self._X[i].tolist(),
                    "modes": list(self._modes[i]),
                    "objective": obj if np.isfinite(obj) else None,
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load_jsonl(cls, path, weights=None, dedup: bool = True) -> "SampleStore":
        store = None
        with open(path) as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    x = np.asarray(rec["x"], dtype=float)
                    modes = rec["modes"]
                    obj = rec.get("objective")
                except (ValueError, KeyError, TypeError) as exc:
                    raise InvalidParameter(f"{path}:{line_no}: bad sample record ({exc})") from exc
                if store is None:
                    store = cls(x.size, weights, dedup)
                store.add(x, modes, float("nan") if obj is None else obj)
        if store is None:
            raise InvalidParameter(f"{path}: no samples")
        return store


def nn_query(store: SampleStore, x) -> tuple[ModeSequence, float] | None:
    """Mode sequence and distance of the nearest stored state, or None if empty."""
    hit = store.query(x)
    return None if hit is None else (hit.modes, hit.distance)


# ---------------------------------------------------------------------------
# online controller


@dataclass
class StepRecord:
    x: np.ndarray
    u0: np.ndarray
    modes: ModeSequence
    mip_invoked: bool
    warm_start_feasible: bool
    solve_time: float
    objective: float
    # first predicted state of the solution trajectory
    x_next_pred: np.ndarray
    mip_status: str | None = None
    nn_distance: float | None = None


@dataclass
class LnmsStats:
    steps: int = 0
    mip_invocations: int = 0
    qp_only_steps: int = 0
    records: list[StepRecord] = field(default_factory=list)

    @property
    def mip_fraction(self) -> float:
        return self.mip_invocations / self.steps if self.steps else 0.0

    def _push(self, rec: StepRecord):
        self.steps += 1
        if rec.mip_invoked:
            self.mip_invocations += 1
        else:
            self.qp_only_steps += 1
        self.records.append(rec)


class LnmsController:
    """Online controller that reuses mode sequences of nearby stored states.

    Args:
        ocp: hybrid optimal control problem solved at every step.
        store: sample store shared across rollouts; a fresh one is made if None.
        config: branch-and-bound settings for steps that need the MIP.
        qp_config: QP solver settings.
        keep_records: keep every StepRecord in ``stats.records``.
    """

    def __init__(
        self,
        ocp: HybridOcp,
        store: SampleStore | None = None,
        config: BnbConfig | None = None,
        qp_config: QpConfig | None = None,
        keep_records: bool = True,
    ):
        self.ocp = ocp
        self.store = store if store is not None else SampleStore(ocp.system.n_x)
        if self.store.n_x != ocp.system.n_x:
            raise DimensionMismatch("store dimension does not match the system")
        self.config = config or BnbConfig()
        self.qp_config = qp_config
        self.keep_records = keep_records
        self.stats = LnmsStats()

    def control_step(self, x_p, config: BnbConfig | None = None):
        """Compute the input to apply at ``x_p``.

        Returns:
            ``(u0, modes, record)``.

        Raises:
            InfeasibleProblem: if no mode sequence is feasible from ``x_p``.
            NoConvergence: if branch and bound ran out of budget without a
                feasible sequence.
        """
        x_p = np.asarray(x_p, dtype=float).reshape(-1)
        if not np.all(np.isfinite(x_p)):
            raise InvalidParameter("x_p must be finite")
        cfg = config or self.config
        t0 = time.perf_counter()
        hit = self.store.query(x_p)

        try_label = hit is not None
        if try_label and cfg.presolve:
            # skip the QP when the label passes through a mode that cannot be reached
            reach = reachable_modes(self.ocp, x_p)
            try_label = reach is not None and all(m in a for m, a in zip(hit.modes, reach))
        if try_label:
            qp_sol = solve_fixed_modes(self.ocp, hit.modes, x_p, self.qp_config)
            if qp_sol.status is QpStatus.OPTIMAL:
                u, x = unpack_trajectory(self.ocp, x_p, qp_sol.z)
                rec = StepRecord(
                    x_p, u[0], hit.modes, False, True, time.perf_counter() - t0,
                    qp_sol.objective, x[1], None, hit.distance,
                )
                return self._finish(x_p, hit.modes, qp_sol.objective, rec)

        sol: MiqpSolution = solve_bnb(
            self.ocp, x_p, None if hit is None else hit.modes, cfg, self.qp_config
        )
        if not sol.feasible:
            raise NoConvergence(f"branch and bound stopped ({sol.status.value}) without a feasible sequence")
        rec = StepRecord(
            x_p, sol.u[0], sol.modes, True, sol.warm_start_feasible, time.perf_counter() - t0,
            sol.objective, sol.x[1], sol.status.value, None if hit is None else hit.distance,
        )
        return self._finish(x_p, sol.modes, sol.objective, rec)

    def _finish(self, x_p, modes, objective, rec):
        self.store.add(x_p, modes, objective)
        self.stats._push(rec)
        if not self.keep_records:
            self.stats.records.clear()
        return rec.u0.copy(), modes, rec


def control_step(controller: LnmsController, x_p, config: BnbConfig | None = None):
    return controller.control_step(x_p, config)


# ---------------------------------------------------------------------------
# offline relabeling


@dataclass(frozen=True)
class ImprovementRow:
    index: int
    old_obj: float
    new_obj: float
    changed: bool


@dataclass
class ImprovementReport:
    rows: list[ImprovementRow] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    @property
    def n_changed(self) -> int:
        return sum(r.changed for r in self.rows)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["index", "old_obj", "new_obj", "changed"])
            for r in self.rows:
                wr.writerow([r.index, repr(r.old_obj), repr(r.new_obj), int(r.changed)])


def improve_samples(
    store: SampleStore,
    ocp: HybridOcp,
    budget_per_sample: float | None,
    subset=None,
    gap_tol: float = 1e-6,
    qp_config: QpConfig | None = None,
) -> ImprovementReport:
    """Relabel stored samples with branch and bound warm-started by their labels.

    Each selected sample gets at most ``budget_per_sample`` seconds (None
    means run to ``gap_tol``). The stored label is replaced by the returned
    sequence, whose cost never exceeds the old one since the old label is the
    first incumbent. Samples whose label is infeasible at their own state are
    logged and listed in ``report.skipped``.
    """
    if budget_per_sample is not None and budget_per_sample < 0:
        raise InvalidParameter("budget_per_sample must be non-negative")
    idx = range(len(store)) if subset is None else [int(i) for i in subset]
    cfg = BnbConfig(time_limit=budget_per_sample, gap_tol=gap_tol, stop_at_first_feasible=False)
    report = ImprovementReport()
    for i in idx:
        x, modes, _ = store.sample(i)
        modes = as_mode_sequence(modes, ocp.N, ocp.system.n_modes)
        old = solve_fixed_modes(ocp, modes, x, qp_config)
        if old.status is not QpStatus.OPTIMAL:
            logger.warning("sample %d skipped: %s", i, SkippedInfeasible(f"label infeasible ({old.status.value})"))
            report.skipped.append(i)
            continue
        sol = solve_bnb(ocp, x, modes, cfg, qp_config)
        if not sol.feasible or sol.objective > old.objective:
            # the warm start is the first incumbent, so this only happens on solver disagreement
            logger.warning("sample %d: search returned no improvement over its label", i)
            report.rows.append(ImprovementRow(i, old.objective, old.objective, False))
            continue
        changed = sol.modes != modes
        store.relabel(i, sol.modes, sol.objective)
        report.rows.append(ImprovementRow(i, old.objective, sol.objective, changed))
        if sol.status is MiqpStatus.TIME_LIMIT:
            logger.debug("sample %d: budget exhausted at gap %.2e", i, sol.gap)
    return report
