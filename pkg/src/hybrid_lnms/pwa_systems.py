"""Discrete-time piecewise-affine systems and the benchmark environments.

A system is a list of affine modes ``x+ = A x + B u + c``, each active on a
guard polytope ``H x + J u <= k``, plus global state and input boxes.
Modes are indexed from 0; the environment builders order them as

* cart: 0 = free motion, 1 = contact with the right wall, 2 = left wall;
* pendulum: 0 = free swing, 1 = contact with the elastic wall.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, InvalidParameter, NoActiveMode, NoConvergence, NotConverged

logger = logging.getLogger(__name__)

EPS_GUARD = 1e-9


def _vec(v, name=""):
    return np.atleast_1d(np.asarray(v, dtype=float)).reshape(-1)


def _mat(a, rows, cols, name):
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return np.zeros((rows, cols))
    a = a.reshape(rows, cols) if a.ndim < 2 else a
    if a.shape != (rows, cols):
        raise DimensionMismatch(f"{name} has shape {a.shape}, expected {(rows, cols)}")
    return a


@dataclass(frozen=True)
class PwaMode:
    """One affine piece ``x+ = A x + B u + c`` valid where ``guard_H x + guard_J u <= guard_k``."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    guard_H: np.ndarray
    guard_J: np.ndarray
    guard_k: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n_x = A.shape[0]
        if A.shape != (n_x, n_x):
            raise DimensionMismatch(f"A must be square, got {A.shape}")
        B = np.asarray(self.B, dtype=float)
        B = B.reshape(n_x, -1) if B.ndim < 2 else B
        n_u = B.shape[1]
        k = _vec(self.guard_k) if np.size(self.guard_k) else np.zeros(0)
        n_g = k.shape[0]
        H = _mat(self.guard_H, n_g, n_x, "guard_H")
        J = _mat(self.guard_J, n_g, n_u, "guard_J")
        c = _vec(self.c)
        if c.shape[0] != n_x or B.shape[0] != n_x:
            raise DimensionMismatch("mode dimensions are inconsistent")
        for name, arr in (("A", A), ("B", B), ("c", c), ("guard_H", H), ("guard_J", J), ("guard_k", k)):
            if not np.all(np.isfinite(arr)):
                raise InvalidParameter(f"{name} has non-finite entries")
        for name, arr in (("A", A), ("B", B), ("c", c), ("guard_H", H), ("guard_J", J), ("guard_k", k)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    def guard_violation(self, x, u) -> float:
        """Largest guard row violation (<= 0 means the guard holds)."""
        if self.guard_k.shape[0] == 0:
            return -np.inf
        return float(np.max(self.guard_H @ x + self.guard_J @ u - self.guard_k))


@dataclass(frozen=True)
class PwaSystem:
    modes: tuple[PwaMode, ...]
    x_min: np.ndarray
    x_max: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    dt: float

    def __post_init__(self):
        modes = tuple(self.modes)
        if not modes:
            raise InvalidParameter("a PWA system needs at least one mode")
        n_x, n_u = modes[0].n_x, modes[0].n_u
        for m in modes:
            if m.n_x != n_x or m.n_u != n_u:
                raise DimensionMismatch("all modes must share state and input dimensions")
        x_min, x_max = _vec(self.x_min), _vec(self.x_max)
        u_min, u_max = _vec(self.u_min), _vec(self.u_max)
        if x_min.shape != (n_x,) or x_max.shape != (n_x,):
            raise DimensionMismatch("state bounds have the wrong length")
        if u_min.shape != (n_u,) or u_max.shape != (n_u,):
            raise DimensionMismatch("input bounds have the wrong length")
        if not (np.all(x_min < x_max) and np.all(u_min < u_max)):
            raise InvalidParameter("bounds must satisfy min < max componentwise")
        if not self.dt > 0:
            raise InvalidParameter("dt must be positive")
        object.__setattr__(self, "modes", modes)
        for name, arr in (("x_min", x_min), ("x_max", x_max), ("u_min", u_min), ("u_max", u_max)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n_x(self) -> int:
        return self.modes[0].n_x

    @property
    def n_u(self) -> int:
        return self.modes[0].n_u

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def input_independent_guards(self) -> bool:
        return all(not np.any(m.guard_J) for m in self.modes)

    def in_bounds(self, x, tol: float = EPS_GUARD) -> bool:
        x = _vec(x)
        return bool(np.all(x >= self.x_min - tol) and np.all(x <= self.x_max + tol))

    def to_dict(self) -> dict:
        return {
            "modes": [
                {k: getattr(m, k).tolist() for k in ("A", "B", "c", "guard_H", "guard_J", "guard_k")}
                for m in self.modes
            ],
            "n_x": self.n_x,
            "n_u": self.n_u,
            "dt": self.dt,
            "x_min": self.x_min.tolist(),
            "x_max": self.x_max.tolist(),
            "u_min": self.u_min.tolist(),
            "u_max": self.u_max.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PwaSystem":
        n_x, n_u = int(doc["n_x"]), int(doc["n_u"])
        modes = []
        for m in doc["modes"]:
            n_g = len(m["guard_k"])
            modes.append(
                PwaMode(
                    _mat(m["A"], n_x, n_x, "A"),
                    _mat(m["B"], n_x, n_u, "B"),
                    m["c"],
                    _mat(m["guard_H"], n_g, n_x, "guard_H"),
                    _mat(m["guard_J"], n_g, n_u, "guard_J"),
                    m["guard_k"],
                )
            )
        return cls(tuple(modes), doc["x_min"], doc["x_max"], doc["u_min"], doc["u_max"], doc["dt"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PwaSystem":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Polytope:
    """The set ``{x : F x <= g}``."""

    F: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        g = _vec(self.g) if np.size(self.g) else np.zeros(0)
        F = np.asarray(self.F, dtype=float)
        F = F.reshape(g.shape[0], -1) if F.ndim < 2 else F
        if F.shape[0] != g.shape[0]:
            raise DimensionMismatch("F and g row counts differ")
        F.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "g", g)

    @property
    def n_rows(self) -> int:
        return self.g.shape[0]

    def contains(self, x, tol: float = 1e-9) -> bool:
        return bool(np.all(self.F @ _vec(x) <= self.g + tol))

    @classmethod
    def box(cls, lo, hi) -> "Polytope":
        lo, hi = _vec(lo), _vec(hi)
        n = lo.shape[0]
        return cls(np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([hi, -lo]))

    def to_dict(self) -> dict:
        return {"F": self.F.tolist(), "g": self.g.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "Polytope":
        return cls(np.asarray(doc["F"], dtype=float), np.asarray(doc["g"], dtype=float))


# ---------------------------------------------------------------------------
# simulation


def active_mode(system: PwaSystem, x, u) -> int:
    """Index of the first mode whose guard holds at ``(x, u)`` within ``EPS_GUARD``."""
    x, u = _vec(x), _vec(u)
    for i, mode in enumerate(system.modes):
        if mode.guard_violation(x, u) <= EPS_GUARD:
            return i
    raise NoActiveMode(f"no mode guard holds at x={x.tolist()}, u={u.tolist()}")


def simulate_step(system: PwaSystem, x, u) -> tuple[np.ndarray, int]:
    x, u = _vec(x), _vec(u)
    i = active_mode(system, x, u)
    mode = system.modes[i]
    return mode.A @ x + mode.B @ u + mode.c, i


# ---------------------------------------------------------------------------
# environments


def build_cart_wall(
    n_walls: int = 1,
    m: float = 1.0,
    eps: float = 0.9,
    dt: float = 0.01,
    x_wall: float = 0.75,
    x_max: Sequence[float] = (1.0, 10.0),
    u_max: float = 100.0,
) -> PwaSystem:
    """Cart between one (right) or two (symmetric) rigid walls.

    Free motion is an Euler-discretized double integrator; a step whose
    predicted position ``x1 + dt x2`` reaches a wall keeps the position and
    reverses the velocity, scaled by the restitution coefficient ``eps``.
    """
    if n_walls not in (1, 2):
        raise InvalidParameter("n_walls must be 1 or 2")
    if not m > 0 or not dt > 0:
        raise InvalidParameter("mass and dt must be positive")
    if not 0 <= eps <= 1:
        raise InvalidParameter("restitution must lie in [0, 1]")
    A_free = np.array([[1.0, dt], [0.0, 1.0]])
    B_free = np.array([[0.0], [dt / m]])
    A_hit = np.array([[1.0, 0.0], [0.0, -eps]])
    B_hit = np.zeros((2, 1))
    # predicted position x1 + dt x2 relative to the wall(s)
    p = np.array([[1.0, dt]])
    zero_c = np.zeros(2)
    zero_J = np.zeros((1, 1))
    if n_walls == 1:
        free = PwaMode(A_free, B_free, zero_c, p, zero_J, [x_wall])
    else:
        free = PwaMode(A_free, B_free, zero_c, np.vstack([p, -p]), np.zeros((2, 1)), [x_wall, x_wall])
    modes = [free, PwaMode(A_hit, B_hit, zero_c, -p, zero_J, [-x_wall])]
    if n_walls == 2:
        modes.append(PwaMode(A_hit, B_hit, zero_c, p, zero_J, [-x_wall]))
    x_max = _vec(x_max)
    return PwaSystem(tuple(modes), -x_max, x_max, [-u_max], [u_max], dt)


def build_elastic_pendulum(
    m: float = 1.0,
    l: float = 1.0,
    g: float = 10.0,
    k: float = 100.0,
    d: float = 0.1,
    dt: float = 0.01,
    x_max: Sequence[float] = (0.3, 1.5),
    u_max: float = 4.0,
) -> PwaSystem:
    """Inverted pendulum leaning on an elastic wall at angle ``d / l``.

    The continuous-time modes are discretized by forward Euler
    (``I + dt A``, ``dt B``, ``dt c``); mode boundaries are evaluated on the
    discretized state. The box bounds are carried by the system rather than
    repeated in each guard.
    """
    if not (m > 0 and l > 0 and dt > 0) or k < 0 or d < 0:
        raise InvalidParameter("pendulum constants must satisfy m, l, dt > 0 and k, d >= 0")
    A1 = np.array([[0.0, 1.0], [g / l, 0.0]])
    A2 = np.array([[0.0, 1.0], [g / l - k / m, 0.0]])
    B = np.array([[0.0], [1.0 / (m * l**2)]])
    c2 = np.array([0.0, k * d / (m * l)])
    I = np.eye(2)
    wall = d / l
    free = PwaMode(I + dt * A1, dt * B, np.zeros(2), [[1.0, 0.0]], [[0.0]], [wall])
    contact = PwaMode(I + dt * A2, dt * B, dt * c2, [[-1.0, 0.0]], [[0.0]], [-wall])
    x_max = _vec(x_max)
    return PwaSystem((free, contact), -x_max, x_max, [-u_max], [u_max], dt)


# ---------------------------------------------------------------------------
# terminal ingredients


def dare_residual(A, B, Q, R, P) -> float:
    A, B, Q, R, P = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (A, B, Q, R, P))
    return float(np.max(np.abs(P - _riccati_map(A, B, Q, R, P))))


def _riccati_map(A, B, Q, R, P):
    BtPA = B.T @ P @ A
    return Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)


def solve_dare(A, B, Q, R, max_iter: int = 10000, tol: float = 1e-10) -> np.ndarray:
    """Solve the discrete algebraic Riccati equation by fixed-point iteration from ``P = Q``."""
    A, B, Q, R = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (A, B, Q, R))
    P = Q.copy()
    for _ in range(max_iter):
        P_next = _riccati_map(A, B, Q, R, P)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            break
        if np.max(np.abs(P_next - P)) < tol:
            return P_next
        P = P_next
    raise NoConvergence(f"Riccati iteration did not converge in {max_iter} steps (pair not stabilizable?)")


def lqr_gain(A, B, Q, R, P=None) -> np.ndarray:
    """Gain ``K`` of the control law ``u = -K x``."""
    A, B, Q, R = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (A, B, Q, R))
    if P is None:
        P = solve_dare(A, B, Q, R)
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def _row_redundant(F, g, row, rhs, tol=1e-9) -> bool:
    from .qp_core import DenseQp, QpStatus, solve_qp

    if not np.any(row):
        return rhs >= -tol
    n = F.shape[1]
    sol = solve_qp(DenseQp(np.zeros((n, n)), -row, A_in=F, b_in=g))
    if sol.status is QpStatus.INFEASIBLE:
        return True
    if sol.status is not QpStatus.OPTIMAL:
        return False
    return -sol.objective <= rhs + tol


def compute_invariant_set(A_cl, constraints: Polytope, max_iter: int = 100, max_rows: int = 512) -> Polytope:
    """Maximal positively invariant subset of ``constraints`` under ``x+ = A_cl x``.

    Rows ``F A_cl^k x <= g`` are appended for k = 1, 2, ... while at least
    one of them is not implied by the current set. Raises ``NotConverged``
    (with the partial set attached) when ``max_iter`` or ``max_rows`` runs out.
    """
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    F0, g0 = constraints.F, constraints.g
    keep = [i for i in range(F0.shape[0]) if not _row_redundant(
        np.delete(F0, i, axis=0), np.delete(g0, i), F0[i], g0[i])]
    F, g = F0[keep], g0[keep]
    Ak = np.eye(A_cl.shape[0])
    for _ in range(max_iter):
        Ak = Ak @ A_cl
        new_F, new_g = [], []
        for row, rhs in zip(F0 @ Ak, g0):
            if not _row_redundant(F, g, row, rhs):
                new_F.append(row)
                new_g.append(rhs)
        if not new_F:
            return Polytope(F, g)
        F = np.vstack([F, new_F])
        g = np.concatenate([g, new_g])
        if F.shape[0] > max_rows:
            raise NotConverged(f"invariant set exceeded {max_rows} rows", partial=Polytope(F, g))
    raise NotConverged(f"invariant set not determined after {max_iter} iterations", partial=Polytope(F, g))


def lqr_terminal_constraints(system: PwaSystem, K, mode: int = 0) -> Polytope:
    """State constraints of ``mode`` under ``u = -K x``: box, input box and the mode guard."""
    n_x = system.n_x
    box = Polytope.box(system.x_min, system.x_max)
    u_rows = np.vstack([-K, K])
    u_rhs = np.concatenate([system.u_max, -system.u_min])
    m = system.modes[mode]
    guard_F = m.guard_H - m.guard_J @ K
    return Polytope(
        np.vstack([box.F, u_rows, guard_F.reshape(-1, n_x)]),
        np.concatenate([box.g, u_rhs, m.guard_k]),
    )
