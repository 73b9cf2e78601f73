"""Hybrid optimal control problems and their QP transcriptions.

The decision vector of every transcription starts with the inputs and the
predicted states, ``z = (u_0, ..., u_{N-1}, x_1, ..., x_N)``; the
relaxation appends one block of relaxed mode indicators per undecided step.
The initial state ``x_0 = x_p`` is a parameter, not a variable, so the
stage cost ``x_0' Q x_0`` enters as the QP's constant offset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidModeSequence, InvalidParameter, NoActiveMode, UnboundedBox
from .pwa_systems import Polytope, PwaSystem, active_mode
from .qp_core import DenseQp

ModeSequence = tuple  # tuple[int, ...]: one 0-based mode index per horizon step

BIG_M_SAFETY = 1.1


@dataclass(frozen=True)
class HybridOcp:
    system: PwaSystem
    N: int
    Q: np.ndarray
    R: np.ndarray
    P_term: np.ndarray
    big_M: float | None = None
    terminal_set: Polytope | None = None
    # cached transcription pieces, filled in __post_init__
    _hess: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n_x, n_u = self.system.n_x, self.system.n_u
        if int(self.N) < 1:
            raise InvalidParameter("horizon N must be at least 1")
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        P = np.atleast_2d(np.asarray(self.P_term, dtype=float))
        if Q.shape != (n_x, n_x) or P.shape != (n_x, n_x) or R.shape != (n_u, n_u):
            raise InvalidParameter("cost matrices do not match the system dimensions")
        if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12 or np.min(np.linalg.eigvalsh(0.5 * (P + P.T))) < -1e-12:
            raise InvalidParameter("Q and P_term must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0:
            raise InvalidParameter("R must be positive definite")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "P_term", P)
        if self.big_M is None:
            object.__setattr__(self, "big_M", compute_big_m(self))
        elif not self.big_M > 0:
            raise InvalidParameter("big_M must be positive")
        object.__setattr__(self, "big_M", float(self.big_M))
        N = self.N
        blocks = [R] * N + [Q] * (N - 1) + [P]
        H = np.zeros((N * (n_u + n_x), N * (n_u + n_x)))
        i = 0
        for b in blocks:
            k = b.shape[0]
            H[i : i + k, i : i + k] = 2.0 * 0.5 * (b + b.T)
            i += k
        H.setflags(write=False)
        object.__setattr__(self, "_hess", H)

    @property
    def n_z(self) -> int:
        return self.N * (self.system.n_u + self.system.n_x)

    def with_big_m(self, big_M: float) -> "HybridOcp":
        return HybridOcp(self.system, self.N, self.Q, self.R, self.P_term, big_M, self.terminal_set)

    def u_index(self, t: int) -> slice:
        n_u = self.system.n_u
        return slice(t * n_u, (t + 1) * n_u)

    def x_index(self, t: int) -> slice:
        """Columns of x_t for t >= 1 (x_0 is a parameter)."""
        n_x = self.system.n_x
        base = self.N * self.system.n_u + (t - 1) * n_x
        return slice(base, base + n_x)


def compute_big_m(ocp: HybridOcp) -> float:
    """Big-M constant covering every dynamics residual and guard violation on the bound box.

    Uses interval arithmetic over ``x, x+`` in the state box and ``u`` in the
    input box, then applies a 1.1 safety factor.
    """
    sys = ocp.system
    for v in (sys.x_min, sys.x_max, sys.u_min, sys.u_max):
        if not np.all(np.isfinite(v)):
            raise UnboundedBox("big-M needs finite state and input bounds")
    xc, xr = 0.5 * (sys.x_max + sys.x_min), 0.5 * (sys.x_max - sys.x_min)
    uc, ur = 0.5 * (sys.u_max + sys.u_min), 0.5 * (sys.u_max - sys.u_min)
    worst = 0.0
    for mode in sys.modes:
        # r = x+ - A x - B u - c, as centre +- radius
        centre = xc - mode.A @ xc - mode.B @ uc - mode.c
        radius = xr + np.abs(mode.A) @ xr + np.abs(mode.B) @ ur
        worst = max(worst, float(np.max(np.abs(centre) + radius)))
        if mode.guard_k.shape[0]:
            centre = mode.guard_H @ xc + mode.guard_J @ uc - mode.guard_k
            radius = np.abs(mode.guard_H) @ xr + np.abs(mode.guard_J) @ ur
            worst = max(worst, float(np.max(centre + radius)))
    return BIG_M_SAFETY * worst


def as_mode_sequence(modes, N: int, n_modes: int) -> ModeSequence:
    """Normalize integer indices or an ``N x n_modes`` one-hot array to a tuple of ints."""
    arr = np.asarray(modes)
    if arr.ndim == 2:
        if arr.shape != (N, n_modes) or not np.all((arr == 0) | (arr == 1)) or not np.all(arr.sum(axis=1) == 1):
            raise InvalidModeSequence("one-hot mode array must have exactly one 1 per step")
        arr = np.argmax(arr, axis=1)
    if arr.ndim != 1 or arr.shape[0] != N:
        raise InvalidModeSequence(f"mode sequence must have length {N}")
    if not np.all(np.equal(np.mod(arr, 1), 0)):
        raise InvalidModeSequence("mode indices must be integers")
    seq = tuple(int(m) for m in arr)
    if any(m < 0 or m >= n_modes for m in seq):
        raise InvalidModeSequence(f"mode indices must lie in [0, {n_modes})")
    return seq


def one_hot(modes: ModeSequence, n_modes: int) -> np.ndarray:
    out = np.zeros((len(modes), n_modes), dtype=int)
    out[np.arange(len(modes)), modes] = 1
    return out


def initial_mode(system: PwaSystem, x_p) -> int | None:
    """Mode the simulator will apply at ``x_p`` when guards ignore the input, else None."""
    if not system.input_independent_guards:
        return None
    try:
        return active_mode(system, x_p, np.zeros(system.n_u))
    except NoActiveMode:
        return None


def reachable_modes(ocp: HybridOcp, x_p, tol: float = 1e-7) -> list[tuple[int, ...]] | None:
    """Modes whose guards can hold at each step, from interval reachability.

    Propagates a box around ``x_p`` through every mode that its guard does
    not rule out, under the full input box, clipped to the state bounds. The
    boxes over-approximate the reachable sets, so a mode dropped here is
    infeasible at that step for every input sequence. Returns None when some
    step has no possible mode or the state box cannot be met.
    """
    sys = ocp.system
    lo = hi = np.asarray(x_p, dtype=float).reshape(-1)
    uc, ur = 0.5 * (sys.u_max + sys.u_min), 0.5 * (sys.u_max - sys.u_min)
    out = []
    for _ in range(ocp.N):
        xc, xr = 0.5 * (hi + lo), 0.5 * (hi - lo)
        modes, new_lo, new_hi = [], [], []
        for i, m in enumerate(sys.modes):
            if m.guard_k.shape[0]:
                g_min = m.guard_H @ xc + m.guard_J @ uc - np.abs(m.guard_H) @ xr - np.abs(m.guard_J) @ ur
                if np.any(g_min > m.guard_k + tol * (1.0 + np.abs(m.guard_k))):
                    continue
            modes.append(i)
            c = m.A @ xc + m.B @ uc + m.c
            r = np.abs(m.A) @ xr + np.abs(m.B) @ ur
            new_lo.append(c - r)
            new_hi.append(c + r)
        if not modes:
            return None
        out.append(tuple(modes))
        lo = np.maximum(np.min(new_lo, axis=0), sys.x_min)
        hi = np.minimum(np.max(new_hi, axis=0), sys.x_max)
        if np.any(lo > hi + tol * (1.0 + np.abs(hi))):
            return None
        hi = np.maximum(hi, lo)
    return out


class _Rows:
    def __init__(self, n):
        self.n = n
        self.A, self.b = [], []

    def add(self, cols, rhs):
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        block = np.zeros((rhs.shape[0], self.n))
        for sl, coef in cols:
            block[:, sl] += coef
        self.A.append(block)
        self.b.append(rhs)

    def add_infeasible(self):
        self.A.append(np.zeros((1, self.n)))
        self.b.append(np.array([-1.0]))

    def stack(self):
        if not self.A:
            return np.zeros((0, self.n)), np.zeros(0)
        return np.vstack(self.A), np.concatenate(self.b)


def _common_rows(ocp: HybridOcp, x_p, n_z, eq: _Rows, ineq: _Rows):
    """Bounds on u and x_1..x_N, the x_0 box check, and the terminal set."""
    sys = ocp.system
    N = ocp.N
    x_p = np.asarray(x_p, dtype=float)
    if not sys.in_bounds(x_p):
        ineq.add_infeasible()
    I_u = np.eye(sys.n_u)
    I_x = np.eye(sys.n_x)
    for t in range(N):
        ineq.add([(ocp.u_index(t), I_u)], sys.u_max)
        ineq.add([(ocp.u_index(t), -I_u)], -sys.u_min)
    for t in range(1, N + 1):
        ineq.add([(ocp.x_index(t), I_x)], sys.x_max)
        ineq.add([(ocp.x_index(t), -I_x)], -sys.x_min)
    if ocp.terminal_set is not None:
        ineq.add([(ocp.x_index(N), ocp.terminal_set.F)], ocp.terminal_set.g)


def _mode_rows(ocp: HybridOcp, x_p, t: int, mode_idx: int, eq: _Rows, ineq: _Rows):
    """Hard dynamics equality and guard of one mode at step t."""
    sys = ocp.system
    mode = sys.modes[mode_idx]
    I_x = np.eye(sys.n_x)
    if t == 0:
        eq.add([(ocp.x_index(1), I_x), (ocp.u_index(0), -mode.B)], mode.A @ x_p + mode.c)
        if mode.guard_k.shape[0]:
            ineq.add([(ocp.u_index(0), mode.guard_J)], mode.guard_k - mode.guard_H @ x_p)
    else:
        eq.add([(ocp.x_index(t + 1), I_x), (ocp.x_index(t), -mode.A), (ocp.u_index(t), -mode.B)], mode.c)
        if mode.guard_k.shape[0]:
            ineq.add([(ocp.x_index(t), mode.guard_H), (ocp.u_index(t), mode.guard_J)], mode.guard_k)


def assemble_fixed_mode_ocp(ocp: HybridOcp, modes, x_p) -> DenseQp:
    """Convex QP of the hybrid OCP with the mode sequence fixed.

    When the guards do not depend on the input, the first mode must be the
    one the simulator applies at ``x_p``; otherwise the QP is made
    trivially infeasible so the plan stays consistent with the plant.
    """
    sys = ocp.system
    seq = as_mode_sequence(modes, ocp.N, sys.n_modes)
    x_p = np.asarray(x_p, dtype=float).reshape(-1)
    n_z = ocp.n_z
    eq, ineq = _Rows(n_z), _Rows(n_z)
    first = initial_mode(sys, x_p)
    if first is not None and seq[0] != first:
        ineq.add_infeasible()
    for t, m in enumerate(seq):
        _mode_rows(ocp, x_p, t, m, eq, ineq)
    _common_rows(ocp, x_p, n_z, eq, ineq)
    A_eq, b_eq = eq.stack()
    A_in, b_in = ineq.stack()
    return DenseQp(ocp._hess, np.zeros(n_z), A_eq, b_eq, A_in, b_in, float(x_p @ ocp.Q @ x_p))


@dataclass
class Relaxation:
    qp: DenseQp
    # per step: tuple of (mode, column of its indicator) or None when the mode is fixed
    indicator_cols: list


def assemble_relaxation(ocp: HybridOcp, x_p, allowed: Sequence[Sequence[int]]) -> Relaxation:
    """Big-M relaxation with the indicators of undecided steps relaxed to [0, 1].

    ``allowed[t]`` lists the modes still permitted at step t. A step with a
    single permitted mode gets hard dynamics; otherwise every permitted mode
    contributes its big-M dynamics and guard rows and an indicator column.
    Disallowed modes are dropped (their indicators are fixed to 0).
    """
    sys = ocp.system
    N, n_x = ocp.N, sys.n_x
    x_p = np.asarray(x_p, dtype=float).reshape(-1)
    M = ocp.big_M
    cols = []
    n_mu = 0
    for t in range(N):
        if len(allowed[t]) == 1:
            cols.append(None)
        else:
            cols.append(tuple((m, ocp.n_z + n_mu + j) for j, m in enumerate(allowed[t])))
            n_mu += len(allowed[t])
    n = ocp.n_z + n_mu
    eq, ineq = _Rows(n), _Rows(n)
    I_x = np.eye(n_x)
    for t in range(N):
        if cols[t] is None:
            _mode_rows(ocp, x_p, t, allowed[t][0], eq, ineq)
            continue
        ind_cols = [c for _, c in cols[t]]
        eq.add([(slice(c, c + 1), np.ones((1, 1))) for c in ind_cols], [1.0])
        for mode_idx, c in cols[t]:
            mode = sys.modes[mode_idx]
            mu = slice(c, c + 1)
            ones = np.full((n_x, 1), M)
            # |x+ - A x - B u - c| <= (1 - mu) M
            if t == 0:
                ineq.add([(ocp.x_index(1), I_x), (ocp.u_index(0), -mode.B), (mu, ones)], M + mode.A @ x_p + mode.c)
                ineq.add([(ocp.x_index(1), -I_x), (ocp.u_index(0), mode.B), (mu, ones)], M - mode.A @ x_p - mode.c)
            else:
                ineq.add([(ocp.x_index(t + 1), I_x), (ocp.x_index(t), -mode.A), (ocp.u_index(t), -mode.B), (mu, ones)],
                         M + mode.c)
                ineq.add([(ocp.x_index(t + 1), -I_x), (ocp.x_index(t), mode.A), (ocp.u_index(t), mode.B), (mu, ones)],
                         M - mode.c)
            n_g = mode.guard_k.shape[0]
            if n_g:
                g_ones = np.full((n_g, 1), M)
                if t == 0:
                    ineq.add([(ocp.u_index(0), mode.guard_J), (mu, g_ones)], M + mode.guard_k - mode.guard_H @ x_p)
                else:
                    ineq.add([(ocp.x_index(t), mode.guard_H), (ocp.u_index(t), mode.guard_J), (mu, g_ones)],
                             M + mode.guard_k)
            ineq.add([(mu, np.ones((1, 1)))], [1.0])
            ineq.add([(mu, -np.ones((1, 1)))], [0.0])
    _common_rows(ocp, x_p, n, eq, ineq)
    H = np.zeros((n, n))
    H[: ocp.n_z, : ocp.n_z] = ocp._hess
    A_eq, b_eq = eq.stack()
    A_in, b_in = ineq.stack()
    qp = DenseQp(H, np.zeros(n), A_eq, b_eq, A_in, b_in, float(x_p @ ocp.Q @ x_p))
    return Relaxation(qp, cols)


def unpack_trajectory(ocp: HybridOcp, x_p, z) -> tuple[np.ndarray, np.ndarray]:
    """Split a solution vector into inputs ``(N, n_u)`` and states ``(N + 1, n_x)`` including x_0."""
    sys = ocp.system
    N = ocp.N
    z = np.asarray(z, dtype=float)
    u = z[: N * sys.n_u].reshape(N, sys.n_u)
    x = np.vstack([np.asarray(x_p, dtype=float).reshape(1, -1), z[N * sys.n_u : ocp.n_z].reshape(N, sys.n_x)])
    return u, x


def trajectory_cost(ocp: HybridOcp, u, x) -> float:
    u = np.asarray(u)
    x = np.asarray(x)
    stage = sum(float(x[t] @ ocp.Q @ x[t] + u[t] @ ocp.R @ u[t]) for t in range(ocp.N))
    return stage + float(x[ocp.N] @ ocp.P_term @ x[ocp.N])
