"""Dense convex quadratic programming.

Problems have the form::

    minimize    0.5 z'Hz + g'z + offset
    subject to  A_eq z  = b_eq
                A_in z <= b_in

and are solved by a Mehrotra predictor-corrector interior-point method
followed by an active-set polishing step that re-solves the KKT system on
the identified active set. Infeasibility is certified by a phase-1 linear
program that minimizes the largest (row-normalized) constraint violation.
"""

from __future__ import annotations

import enum
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch

logger = logging.getLogger(__name__)


class QpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"


def _as_matrix(a, n_cols: int, name: str) -> np.ndarray:
    if a is None:
        return np.zeros((0, n_cols))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return np.zeros((0, n_cols))
    if a.shape[1] != n_cols:
        raise DimensionMismatch(f"{name} has {a.shape[1]} columns, expected {n_cols}")
    return a


def _as_vector(b, n: int, name: str) -> np.ndarray:
    if b is None:
        b = np.zeros(n)
    b = np.asarray(b, dtype=float).reshape(-1)
    if b.shape[0] != n:
        raise DimensionMismatch(f"{name} has length {b.shape[0]}, expected {n}")
    return b


@dataclass(frozen=True)
class DenseQp:
    """Convex QP in dense form. ``offset`` is a constant added to the objective."""

    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    offset: float = 0.0

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        if H.shape[0] != H.shape[1]:
            raise DimensionMismatch(f"H must be square, got {H.shape}")
        n = H.shape[0]
        if np.max(np.abs(H - H.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(H), initial=0.0)):
            raise DimensionMismatch("H is not symmetric")
        A_eq = _as_matrix(self.A_eq, n, "A_eq")
        A_in = _as_matrix(self.A_in, n, "A_in")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "g", _as_vector(self.g, n, "g"))
        object.__setattr__(self, "A_eq", A_eq)
        object.__setattr__(self, "b_eq", _as_vector(self.b_eq, A_eq.shape[0], "b_eq"))
        object.__setattr__(self, "A_in", A_in)
        object.__setattr__(self, "b_in", _as_vector(self.b_in, A_in.shape[0], "b_in"))
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.H @ z + self.g @ z + self.offset)


@dataclass
class QpConfig:
    max_iter: int = 80
    eps_stationarity: float = 1e-8
    eps_feasibility: float = 1e-8
    eps_complementarity: float = 1e-8
    # phase-1 optimal violation above this certifies infeasibility
    eps_infeasible: float = 1e-7
    polish: bool = True


@dataclass
class QpSolution:
    z: np.ndarray | None
    lambda_eq: np.ndarray | None
    lambda_in: np.ndarray | None
    objective: float
    status: QpStatus
    iterations: int = 0
    solve_time: float = 0.0
    # Infeasible: phase-1 optimal violation and the row-normalized Farkas multipliers
    infeasibility: float = 0.0
    certificate: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


# ---------------------------------------------------------------------------
# residuals


def _residuals(H, g, E, f, C, d, z, y, lam):
    """Scaled KKT residuals used by the solver itself to assign a status."""
    Hz = H @ z
    Ety = E.T @ y
    Ctl = C.T @ lam
    stat = Hz + g + Ety + Ctl
    stat_scale = 1.0 + max(_inf(Hz), _inf(g), _inf(Ety), _inf(Ctl))
    Ez = E @ z
    Cz = C @ z
    eq = Ez - f
    slack = d - Cz
    feas_scale = 1.0 + max(_inf(Ez), _inf(f), _inf(Cz), _inf(d))
    primal = max(_inf(eq), float(np.max(-slack, initial=0.0)))
    dual = float(np.max(-lam, initial=0.0))
    comp = float(np.max(np.abs(lam * slack), initial=0.0))
    comp_scale = 1.0 + max(_inf(lam), 0.0) * max(1.0, _inf(d))
    return (
        _inf(stat) / stat_scale,
        primal / feas_scale,
        dual / (1.0 + _inf(lam)),
        comp / comp_scale,
    )


def _inf(v) -> float:
    return float(np.max(np.abs(v), initial=0.0))


def _accept(res, cfg: QpConfig) -> bool:
    stat, primal, dual, comp = res
    return (
        stat < cfg.eps_stationarity
        and primal < cfg.eps_feasibility
        and dual < cfg.eps_feasibility
        and comp < cfg.eps_complementarity
    )


# ---------------------------------------------------------------------------
# interior point


def _lu(M):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        return scipy.linalg.lu_factor(M, check_finite=False)


def _kkt_factor(K, E, delta):
    me = E.shape[0]
    if me == 0:
        try:
            return ("chol", scipy.linalg.cho_factor(K, check_finite=False))
        except np.linalg.LinAlgError:
            return ("lu", _lu(K))
    M = np.block([[K, E.T], [E, -delta * np.eye(me)]])
    return ("lu", _lu(M))


def _kkt_solve(fac, rhs):
    kind, f = fac
    if kind == "chol":
        return scipy.linalg.cho_solve(f, rhs, check_finite=False)
    return scipy.linalg.lu_solve(f, rhs, check_finite=False)


def _ipm(H, g, E, f, C, d, max_iter, tol, z0=None):
    """Mehrotra predictor-corrector. Returns (z, y, lam, s, iters, state)."""
    with np.errstate(all="ignore"):
        return _ipm_loop(H, g, E, f, C, d, max_iter, tol, z0)


def _ipm_loop(H, g, E, f, C, d, max_iter, tol, z0):
    n, me, mi = H.shape[0], E.shape[0], C.shape[0]
    scale = 1.0 + max(_inf(H), _inf(g), _inf(C), _inf(E))
    rho = 1e-11 * scale
    delta = 1e-11 * scale

    # initial point from the KKT system with unit barrier weights
    K0 = H + C.T @ C + rho * np.eye(n)
    fac = _kkt_factor(K0, E, delta)
    sol = _kkt_solve(fac, np.concatenate([-g + C.T @ d, f]))
    z = sol[:n] if z0 is None else np.array(z0, dtype=float)
    y = sol[n:]
    s = d - C @ z
    shift = max(0.0, -float(np.min(s, initial=0.0)))
    s = s + shift + 1.0
    lam = np.ones(mi)

    data_scale = 1.0 + max(_inf(g), _inf(d), _inf(f))
    history = []
    best = (np.inf, z, y, lam, s)
    state = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        rd = H @ z + g + E.T @ y + C.T @ lam
        re = E @ z - f
        ri = C @ z + s - d
        mu = float(lam @ s) / mi if mi else 0.0
        pres = max(_inf(re), _inf(ri))
        history.append(pres)
        merit = max(_inf(rd), pres, mu)
        if merit < best[0]:
            best = (merit, z, y, lam, s)
        if (
            _inf(rd) <= tol * data_scale
            and pres <= tol * data_scale
            and mu <= 1e-2 * tol * data_scale
        ):
            state = "converged"
            break
        if mi and mu <= 1e-18 * data_scale:
            # barrier exhausted; the polishing step takes over from here
            state = "max_iter"
            break
        if _inf(lam) > 1e13 * data_scale or _inf(y) > 1e13 * data_scale:
            state = "diverged"
            break
        if it > 12 and pres > 1e-6 * data_scale and pres > 0.9 * history[-6]:
            state = "stalled"
            break

        w = lam / s
        K = H + (C.T * w) @ C
        try:
            fac = _kkt_factor(K + rho * np.eye(n), E, delta)
        except (np.linalg.LinAlgError, ValueError):
            state = "singular"
            break

        def direction(rc):
            rhs = np.concatenate([-rd - C.T @ (w * ri + rc / s), -re])
            sol = _kkt_solve(fac, rhs)
            # refine against the unregularized Newton system
            for _ in range(2):
                r = rhs - np.concatenate([K @ sol[:n] + E.T @ sol[n:], E @ sol[:n]])
                sol = sol + _kkt_solve(fac, r)
            dz = sol[:n]
            dy = sol[n:]
            dlam = w * (C @ dz + ri) + rc / s
            ds = -ri - C @ dz
            return dz, dy, dlam, ds

        # predictor
        dz, dy, dlam, ds = direction(-lam * s)
        a_aff = min(_max_step(s, ds), _max_step(lam, dlam))
        mu_aff = float((lam + a_aff * dlam) @ (s + a_aff * ds)) / mi if mi else 0.0
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        dz, dy, dlam, ds = direction(-lam * s - dlam * ds + sigma * mu)
        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(lam, dlam)))
        nz, ny = z + alpha * dz, y + alpha * dy
        nlam, ns = lam + alpha * dlam, s + alpha * ds
        if not all(np.all(np.isfinite(v)) for v in (nz, ny, nlam, ns)):
            # keep the last finite iterate for polishing
            state = "max_iter" if pres <= 1e-6 * data_scale else "diverged"
            break
        z, y, lam, s = nz, ny, nlam, ns
    if state != "converged":
        # hand the best iterate seen to polishing rather than the last one
        _, z, y, lam, s = best
    return z, y, lam, s, it, state


def _max_step(v, dv) -> float:
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def _eq_kkt(H, g, A, b):
    n, m = H.shape[0], A.shape[0]
    K = np.block([[H, A.T], [A, np.zeros((m, m))]])
    rhs = np.concatenate([-g, b])
    scale = 1.0 + _inf(K)
    delta = 1e-10 * scale
    Kreg = K + np.diag(np.concatenate([np.full(n, delta), np.full(m, -delta)]))
    try:
        fac = _lu(Kreg)
    except (np.linalg.LinAlgError, ValueError):
        return None
    sol = scipy.linalg.lu_solve(fac, rhs, check_finite=False)
    for _ in range(10):
        r = rhs - K @ sol
        if _inf(r) <= 1e-15 * scale:
            break
        sol = sol + scipy.linalg.lu_solve(fac, r, check_finite=False)
    if not np.all(np.isfinite(sol)):
        return None
    return sol


def _polish(H, g, E, f, C, d, z, lam, s, rounds=10):
    """Active-set refinement started from the interior-point guess.

    Each round solves the equality KKT system on the working set, then adds
    violated rows and drops rows with negative multipliers.
    """
    n, me = H.shape[0], E.shape[0]
    active = lam > s
    tol = 1e-12 * (1.0 + _inf(d))
    best = None
    for _ in range(rounds):
        idx = np.flatnonzero(active)
        sol = _eq_kkt(H, g, np.vstack([E, C[idx]]), np.concatenate([f, d[idx]]))
        if sol is None:
            return best
        zp = sol[:n]
        yp = sol[n : n + me]
        lam_a = sol[n + me :]
        lam_full = np.zeros(C.shape[0])
        lam_full[idx] = np.maximum(lam_a, 0.0)
        best = (zp, yp, lam_full)
        viol = C @ zp - d
        add = (~active) & (viol > tol)
        neg = lam_a < -tol * (1.0 + _inf(lam_a))
        if not np.any(add) and not np.any(neg):
            break
        active[add] = True
        if np.any(neg):
            # drop only the most negative multiplier to avoid cycling
            active[idx[int(np.argmin(lam_a))]] = False
    return best


# ---------------------------------------------------------------------------
# phase 1


def _phase1(E, f, C, d, max_iter, normalize=True):
    """Minimize the largest row-normalized violation t over (z, t), t >= 0."""
    n = E.shape[1] if E.shape[0] else C.shape[1]
    rows, rhs = [], []
    for A, b in ((C, d), (E, f), (-E, -f)):
        if A.shape[0] == 0:
            continue
        norms = np.linalg.norm(A, axis=1) if normalize else np.ones(A.shape[0])
        norms[norms == 0] = 1.0
        rows.append(np.hstack([A / norms[:, None], -np.ones((A.shape[0], 1))]))
        rhs.append(b / norms)
    t_row = np.zeros((1, n + 1))
    t_row[0, -1] = -1.0
    rows.append(t_row)
    rhs.append(np.zeros(1))
    Cp = np.vstack(rows)
    dp = np.concatenate(rhs)
    Hp = np.zeros((n + 1, n + 1))
    gp = np.zeros(n + 1)
    gp[-1] = 1.0
    z, _, lam, s, it, state = _ipm(Hp, gp, np.zeros((0, n + 1)), np.zeros(0), Cp, dp, max_iter, 1e-10)
    return float(z[-1]), lam, it, state


# ---------------------------------------------------------------------------


def solve_qp(qp: DenseQp, config: QpConfig | None = None) -> QpSolution:
    """Solve a convex QP.

    The returned status is ``Optimal`` only when the solution meets the
    stationarity, feasibility and complementarity tolerances of ``config``
    (relative to the magnitude of the terms involved). ``Infeasible`` is
    returned only with a phase-1 violation above ``eps_infeasible``.
    """
    cfg = config or QpConfig()
    t0 = time.perf_counter()
    H, g, n = qp.H, qp.g, qp.n
    E, f, C, d = qp.A_eq, qp.b_eq, qp.A_in, qp.b_in

    # constant rows carry no decision variables: check them and drop them
    zero_in = ~np.any(C != 0.0, axis=1)
    zero_eq = ~np.any(E != 0.0, axis=1)
    bad_in = zero_in & (d < -cfg.eps_infeasible)
    bad_eq = zero_eq & (np.abs(f) > cfg.eps_infeasible)
    if np.any(bad_in) or np.any(bad_eq):
        viol = max(float(np.max(-d[bad_in], initial=0.0)), float(np.max(np.abs(f[bad_eq]), initial=0.0)))
        return QpSolution(
            None, None, None, np.inf, QpStatus.INFEASIBLE,
            solve_time=time.perf_counter() - t0,
            infeasibility=viol,
            certificate={"constant_rows_in": np.flatnonzero(bad_in).tolist(),
                         "constant_rows_eq": np.flatnonzero(bad_eq).tolist()},
        )
    keep_in = ~zero_in
    keep_eq = ~zero_eq
    Ck, dk = C[keep_in], d[keep_in]
    Ek, fk = E[keep_eq], f[keep_eq]

    def finish(z, y, lam, status, iters):
        y_full = np.zeros(E.shape[0])
        y_full[keep_eq] = y
        lam_full = np.zeros(C.shape[0])
        lam_full[keep_in] = lam
        return QpSolution(z, y_full, lam_full, qp.objective(z), status, iters, time.perf_counter() - t0)

    def infeasible(viol, iters, cert):
        return QpSolution(
            None, None, None, np.inf, QpStatus.INFEASIBLE, iters,
            time.perf_counter() - t0, infeasibility=viol, certificate=cert,
        )

    # eliminate the equalities: z = z_p + Z w with Z an orthonormal null-space basis
    z_p, Z = _null_space_split(Ek, fk)
    eq_res = _inf(Ek @ z_p - fk)
    if eq_res > cfg.eps_infeasible * (1.0 + _inf(fk)):
        return infeasible(eq_res, 0, {"equality_residual": eq_res})

    def full(w, lam):
        z = z_p + Z @ w
        y = _equality_multipliers(H, g, Ek, Ck, z, lam)
        return z, y

    nr = np.max(np.abs(Ck), axis=1) if Ck.shape[0] else np.zeros(0)
    Cr = (Ck @ Z) / nr[:, None] if Ck.shape[0] else np.zeros((0, Z.shape[1]))
    dr = (dk - Ck @ z_p) / nr if Ck.shape[0] else np.zeros(0)
    Hr = Z.T @ H @ Z
    gr = Z.T @ (H @ z_p + g)
    c_obj = max(1.0, _inf(Hr), _inf(gr))
    Hs, gs = Hr / c_obj, gr / c_obj
    E0 = np.zeros((0, Z.shape[1]))

    if Z.shape[1] == 0 or Cr.shape[0] == 0:
        sol = _solve_equality_qp(Hs, gs, E0, np.zeros(0)) if Z.shape[1] else (np.zeros(0), None)
        if sol is not None:
            w = sol[0]
            viol = float(np.max(Cr @ w - dr, initial=0.0))
            if viol > cfg.eps_infeasible:
                return infeasible(viol, 1, {"fixed_point_violation": viol})
            lam = np.zeros(Ck.shape[0])
            z, y = full(w, lam)
            if _accept(_residuals(H, g, Ek, fk, Ck, dk, z, y, lam), cfg):
                return finish(z, y, lam, QpStatus.OPTIMAL, 1)
        if Cr.shape[0] == 0:
            return QpSolution(None, None, None, np.inf, QpStatus.MAX_ITER, 1, time.perf_counter() - t0)

    w, _, lam, s, iters, state = _ipm(Hs, gs, E0, np.zeros(0), Cr, dr, cfg.max_iter, 1e-10)
    candidates = []
    if np.all(np.isfinite(w)) and np.all(np.isfinite(lam)):
        candidates.append((w, np.maximum(lam, 0.0)))
        if cfg.polish:
            pol = _polish(Hs, gs, E0, np.zeros(0), Cr, dr, w, lam, s)
            if pol is not None:
                candidates.insert(0, (pol[0], pol[2]))
    last = None
    for wc, lc in candidates:
        lam_c = lc * c_obj / nr
        z, y = full(wc, lam_c)
        last = (z, y, lam_c)
        if _accept(_residuals(H, g, Ek, fk, Ck, dk, z, y, lam_c), cfg):
            return finish(z, y, lam_c, QpStatus.OPTIMAL, iters)

    # not certified optimal: decide between infeasible and numerical trouble
    t_opt, lam1, it1, _ = _phase1(E0, np.zeros(0), Cr, dr, cfg.max_iter, normalize=False)
    iters += it1
    if t_opt > cfg.eps_infeasible:
        return infeasible(t_opt, iters, {"phase1_multipliers": lam1})
    logger.debug("QP not certified (state=%s, phase-1 violation %.2e)", state, t_opt)
    if last is not None:
        return finish(*last, QpStatus.MAX_ITER, iters)
    return QpSolution(None, None, None, np.inf, QpStatus.MAX_ITER, iters, time.perf_counter() - t0)


def _null_space_split(E, f):
    """Minimum-norm particular solution of E z = f and an orthonormal basis of ker E."""
    n = E.shape[1]
    if E.shape[0] == 0:
        return np.zeros(n), np.eye(n)
    U, sv, Vt = np.linalg.svd(E)
    rank = int(np.sum(sv > 1e-12 * max(1.0, sv[0])))
    z_p = Vt[:rank].T @ ((U[:, :rank].T @ f) / sv[:rank])
    # one refinement step against the full matrix
    r = f - E @ z_p
    z_p = z_p + Vt[:rank].T @ ((U[:, :rank].T @ r) / sv[:rank])
    return z_p, Vt[rank:].T


def _equality_multipliers(H, g, E, C, z, lam):
    if E.shape[0] == 0:
        return np.zeros(0)
    r = -(H @ z + g + C.T @ lam)
    return np.linalg.lstsq(E.T, r, rcond=None)[0]


def _solve_equality_qp(H, g, E, f):
    n, me = H.shape[0], E.shape[0]
    K = np.block([[H, E.T], [E, np.zeros((me, me))]])
    rhs = np.concatenate([-g, f])
    try:
        sol = scipy.linalg.solve(K, rhs, assume_a="sym", check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    if not np.all(np.isfinite(sol)):
        return None
    return sol[:n], sol[n:]


def check_feasibility(qp: DenseQp, config: QpConfig | None = None) -> tuple[bool, float]:
    """Solve the zero-objective feasibility problem.

    Returns ``(feasible, max_violation)`` with feasibility declared when the
    maximum constraint violation of the returned point is below 1e-7.
    """
    cfg = config or QpConfig()
    feas_qp = DenseQp(np.zeros((qp.n, qp.n)), np.zeros(qp.n), qp.A_eq, qp.b_eq, qp.A_in, qp.b_in)
    sol = solve_qp(feas_qp, cfg)
    if sol.z is None:
        return False, sol.infeasibility
    viol = max_violation(qp, sol.z)
    return viol < cfg.eps_infeasible, viol


def max_violation(qp: DenseQp, z) -> float:
    z = np.asarray(z, dtype=float)
    v_eq = _inf(qp.A_eq @ z - qp.b_eq)
    v_in = float(np.max(qp.A_in @ z - qp.b_in, initial=0.0))
    return max(v_eq, v_in, 0.0)


def dump_qp(qp: DenseQp, path) -> None:
    """Write a QP as plain text: one ``# name rows cols`` header per matrix, then rows."""
    with open(path, "w") as fh:
        for name in ("H", "g", "A_eq", "b_eq", "A_in", "b_in"):
            arr = np.atleast_2d(getattr(qp, name))
            if name in ("g", "b_eq", "b_in"):
                arr = arr.reshape(1, -1)
            fh.write(f"# {name} {arr.shape[0]} {arr.shape[1]}\n")
            for row in arr:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        fh.write(f"# offset 1 1\n{qp.offset!r}\n")


def load_qp(path) -> DenseQp:
    parts: dict[str, np.ndarray] = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    i = 0
    while i < len(lines):
        _, name, r, c = lines[i].split()
        r, c = int(r), int(c)
        rows = [np.array(lines[i + 1 + k].split(), dtype=float) if c else np.zeros(0) for k in range(r)]
        parts[name] = np.array(rows).reshape(r, c)
        i += 1 + r
    return DenseQp(
        parts["H"], parts["g"].reshape(-1),
        parts["A_eq"] if parts["b_eq"].size else None, parts["b_eq"].reshape(-1),
        parts["A_in"] if parts["b_in"].size else None, parts["b_in"].reshape(-1),
        float(parts["offset"][0, 0]),
    )
