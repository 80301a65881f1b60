"""Dense ADMM solver for ``min 1/2 w'Hw + f'w  s.t.  Gw <= h``.

Internally the inequalities are rewritten as ``l <= Aw <= u``: rows are
normalised, and pairs of opposite rows (``g'w <= a`` and ``-g'w <= b``)
are merged into one two-sided row, which turns pinned variables into
equalities. The problem is then equilibrated (Ruiz scaling plus a cost
scale) and solved by the operator-splitting iteration

    (H + sigma I + A' diag(rho) A) w~ = sigma w - f + A'(rho v - y)
    v~ = A w~
    w  = alpha w~ + (1 - alpha) w
    v+ = clip(alpha v~ + (1 - alpha) v + y / rho, l, u)
    y  = y + rho (alpha v~ + (1 - alpha) v - v+)

with ``rho`` adapted from the residual balance. Whenever the iterate is
reasonably close, the equality-constrained problem on the guessed active
set is solved directly ("polishing"); a polished point is accepted only if
it passes the KKT check at the requested tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import math

import numpy as np
import scipy.linalg as sla

OPTIMAL = "optimal"
MAX_ITERS = "max_iters"
INFEASIBLE = "infeasible"

_INF = np.inf
_EQ_RHO_FACTOR = 1e3
_MIN_SCALE, _MAX_SCALE = 1e-4, 1e4


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    G: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.f = np.asarray(self.f, dtype=float).ravel()
        n = self.f.size
        self.G = np.asarray(self.G, dtype=float).reshape(-1, n)
        self.h = np.asarray(self.h, dtype=float).ravel()
        if self.H.shape != (n, n) or self.G.shape[0] != self.h.size:
            raise ValueError("inconsistent QP dimensions")

    @property
    def n(self) -> int:
        return self.f.size

    @property
    def m(self) -> int:
        return self.h.size

    def objective(self, w) -> float:
        w = np.asarray(w, dtype=float)
        return float(0.5 * w @ self.H @ w + self.f @ w)

    def check(self, tol: float = 1e-10) -> None:
        """Raise ValueError unless H is symmetric and positive semidefinite."""
        scale = max(1.0, np.abs(self.H).max(initial=0.0))
        if np.abs(self.H - self.H.T).max(initial=0.0) > tol * scale:
            raise ValueError("H is not symmetric")
        if self.n and np.linalg.eigvalsh(self.H).min() < -1e-8 * np.linalg.norm(self.H, 2):
            raise ValueError("H is not positive semidefinite")


@dataclass
class QpSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iters: int = 20000
    rho: float = 1.0
    sigma: float = 1e-6
    alpha: float = 1.6
    scaling_iters: int = 10
    adaptive_rho: bool = True
    adaptive_interval: int = 25
    polish: bool = True
    polish_interval: int = 25
    check_interval: int = 5


@dataclass
class QpSolution:
    w: np.ndarray
    status: str
    primal_residual: float
    dual_residual: float
    iterations: int
    multipliers: np.ndarray = field(repr=False, default=None)
    polished: bool = False
    # duals of the internal two-sided rows, reusable as a warm start
    row_duals: np.ndarray = field(repr=False, default=None)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def kkt_residuals(p: QpProblem, w, mu) -> tuple[float, float, float]:
    """(primal infeasibility, stationarity, complementarity), 2-norms."""
    w = np.asarray(w, dtype=float)
    mu = np.zeros(p.m) if mu is None else np.asarray(mu, dtype=float)
    slack = p.G @ w - p.h
    primal = float(np.linalg.norm(np.maximum(slack, 0.0)))
    dual = float(np.linalg.norm(p.H @ w + p.f + p.G.T @ mu))
    comp = float(abs(mu @ slack))
    return primal, dual, comp


class QpSolver:
    """Holds settings and the last solution; one instance per control loop."""

    def __init__(self, settings: QpSettings | None = None):
        self.settings = settings or QpSettings()
        self.last: QpSolution | None = None

    def solve(self, p: QpProblem, warm=None) -> QpSolution:
        self.last = solve(p, self.settings, warm)
        return self.last


@dataclass
class _Boxed:
    # l <= A w <= u, with the original row each side came from
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray
    upper_row: np.ndarray  # index into G or -1
    lower_row: np.ndarray
    norm_up: np.ndarray
    norm_lo: np.ndarray


def _to_boxed(G: np.ndarray, h: np.ndarray) -> _Boxed:
    norms = np.linalg.norm(G, axis=1)
    idx = np.flatnonzero(norms > 0)
    R = G[idx] / norms[idx, None]
    b = h[idx] / norms[idx]
    # + 0.0 folds -0.0 into 0.0 so opposite rows produce equal keys
    keys = [row.tobytes() for row in np.round(R, 12) + 0.0]
    neg_keys = [row.tobytes() for row in np.round(-R, 12) + 0.0]

    # identical rows collapse onto the tightest one
    tightest: dict[bytes, int] = {}
    for pos, k in enumerate(keys):
        if k not in tightest or b[pos] < b[tightest[k]]:
            tightest[k] = pos
    rows, l, u, up, lo, nu, nl = [], [], [], [], [], [], []
    done = set()
    for k, pos in tightest.items():
        if k in done:
            continue
        done.add(k)
        rows.append(R[pos])
        u.append(b[pos])
        up.append(idx[pos])
        nu.append(norms[idx[pos]])
        partner = tightest.get(neg_keys[pos])
        if partner is None:
            l.append(-_INF)
            lo.append(-1)
            nl.append(1.0)
        else:
            done.add(keys[partner])
            l.append(-b[partner])
            lo.append(idx[partner])
            nl.append(norms[idx[partner]])
    n = G.shape[1]
    return _Boxed(np.array(rows).reshape(-1, n), np.array(l), np.array(u),
                  np.array(up, dtype=int), np.array(lo, dtype=int), np.array(nu), np.array(nl))


def _ruiz(H, A, f, iters):
    n, m = H.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Hs, As, fs = H.copy(), A.copy(), f.copy()
    for _ in range(iters):
        col = np.abs(Hs).max(axis=0)
        if m:
            col = np.maximum(col, np.abs(As).max(axis=0))
        d = 1.0 / np.sqrt(np.clip(col, _MIN_SCALE, _MAX_SCALE))
        e = 1.0 / np.sqrt(np.clip(np.abs(As).max(axis=1), _MIN_SCALE, _MAX_SCALE)) if m else E
        Hs = d[:, None] * Hs * d[None, :]
        As = e[:, None] * As * d[None, :] if m else As
        fs = d * fs
        D *= d
        if m:
            E *= e
    cost = max(np.abs(Hs).max(axis=0).mean() if n else 0.0, np.abs(fs).max(initial=0.0))
    c = 1.0 / np.clip(cost, _MIN_SCALE, _MAX_SCALE) if cost > 0 else 1.0
    return Hs * c, As, fs * c, D, E, c


def _factor(H, A, sigma, rho):
    K = H + sigma * np.eye(H.shape[0]) + A.T @ (rho[:, None] * A)
    return sla.cho_factor(K, lower=True, check_finite=False)


def _multipliers(box: _Boxed, y: np.ndarray, m: int) -> np.ndarray:
    # boxed-row dual y (>0 upper, <0 lower) to multipliers of the G rows
    mu = np.zeros(m)
    pos, neg = np.maximum(y, 0.0), np.maximum(-y, 0.0)
    mu[box.upper_row] += pos / box.norm_up
    has_lo = box.lower_row >= 0
    mu[box.lower_row[has_lo]] += neg[has_lo] / box.norm_lo[has_lo]
    return mu


def solve(p: QpProblem, settings: QpSettings | None = None, warm=None) -> QpSolution:
    """Solve ``p``.

    ``warm`` is an optional ``(w, v, y)`` start in unscaled coordinates;
    ``v`` and ``y`` refer to the internal two-sided rows and may be None.
    """
    s = settings or QpSettings()
    n, m = p.n, p.m

    zero_rows = np.all(p.G == 0, axis=1)
    if np.any(p.h[zero_rows] < 0):
        return QpSolution(np.zeros(n), INFEASIBLE, float(-p.h[zero_rows].min()), 0.0, 0, np.zeros(m))

    box = _to_boxed(p.G, p.h)
    if np.any(box.l > box.u + 1e-12):
        return QpSolution(np.zeros(n), INFEASIBLE, float((box.l - box.u).max()), 0.0, 0, np.zeros(m))
    mb = box.A.shape[0]

    if mb == 0:
        w = np.linalg.lstsq(p.H, -p.f, rcond=None)[0]
        r = float(np.abs(p.H @ w + p.f).max(initial=0.0))
        tol = s.eps_abs + s.eps_rel * np.abs(p.f).max(initial=0.0)
        return QpSolution(w, OPTIMAL if r <= tol else INFEASIBLE, 0.0, r, 0, np.zeros(m))

    Hs, As, fs, D, E, c = _ruiz(p.H, box.A, p.f, s.scaling_iters)
    ls = np.where(np.isfinite(box.l), box.l * E, -_INF)
    us = box.u * E
    eq = np.abs(box.u - box.l) < 1e-12

    rho_val = s.rho
    rho = np.where(eq, _EQ_RHO_FACTOR * rho_val, rho_val)
    sigma, alpha = s.sigma, s.alpha
    factor = _factor(Hs, As, sigma, rho)

    if warm is not None:
        w = np.asarray(warm[0], dtype=float) / D
        v = np.clip(As @ w, ls, us) if warm[1] is None else np.asarray(warm[1]) * E
        y = np.zeros(mb) if warm[2] is None else np.asarray(warm[2]) * c / E
    else:
        w, v, y = np.zeros(n), np.clip(np.zeros(mb), ls, us), np.zeros(mb)

    Dinv_scale = 1.0 / D
    status = MAX_ITERS
    r_prim = r_dual = np.inf
    polished = None
    it = 0
    if s.polish and warm is not None and warm[2] is not None:
        # a warm start that carries duals often pins the active set already
        polished = _polish(p, box, D * w, E * y / c, s)
    for it in range(1, 0 if polished is not None else s.max_iters + 1):
        rhs = sigma * w - fs + As.T @ (rho * v - y)
        w_t = sla.cho_solve(factor, rhs, check_finite=False)
        v_t = As @ w_t
        w = alpha * w_t + (1 - alpha) * w
        v_relax = alpha * v_t + (1 - alpha) * v
        v_new = np.clip(v_relax + y / rho, ls, us)
        y = y + rho * (v_relax - v_new)
        v = v_new

        if it % s.check_interval and it != s.max_iters:
            continue
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(y))):
            status = INFEASIBLE
            break
        # residuals in unscaled units
        Aw = As @ w
        r_prim = float(np.abs((Aw - v) / E).max())
        Hw, Aty = Hs @ w, As.T @ y
        r_dual = float(np.abs((Hw + fs + Aty) * Dinv_scale).max()) / c
        eps_p = s.eps_abs + s.eps_rel * max(np.abs(Aw / E).max(), np.abs(v / E).max())
        eps_d = s.eps_abs + s.eps_rel * max(np.abs(Hw * Dinv_scale).max(), np.abs(Aty * Dinv_scale).max(),
                                            np.abs(fs * Dinv_scale).max()) / c
        if r_prim <= eps_p and r_dual <= eps_d:
            status = OPTIMAL
            break
        if np.abs(w).max() > 1e15:
            status = INFEASIBLE
            break
        if s.polish and it % s.polish_interval == 0:
            polished = _polish(p, box, D * w, E * y / c, s, max_passes=3)
            if polished is not None:
                break
        if s.adaptive_rho and it % s.adaptive_interval == 0:
            # balance computed on the scaled problem
            num = np.abs(Aw - v).max() / max(np.abs(Aw).max(), np.abs(v).max(), 1e-30)
            den = np.abs(Hw + fs + Aty).max() / max(np.abs(Hw).max(), np.abs(Aty).max(),
                                                     np.abs(fs).max(), 1e-30)
            new_rho = float(np.clip(rho_val * np.sqrt(num / max(den, 1e-30)), 1e-6, 1e6))
            if new_rho > 5 * rho_val or new_rho < 0.2 * rho_val:
                rho_val = new_rho
                rho = np.where(eq, _EQ_RHO_FACTOR * rho_val, rho_val)
                factor = _factor(Hs, As, sigma, rho)

    w_out = D * w
    y_out = E * y / c
    if polished is None and s.polish and status != INFEASIBLE:
        polished = _polish(p, box, w_out, y_out, s)
    if polished is not None:
        w_p, y_p, rp, rd = polished
        return QpSolution(w_p, OPTIMAL, rp, rd, it, _multipliers(box, y_p, m), True, y_p)
    return QpSolution(w_out, status, r_prim, r_dual, it, _multipliers(box, y_out, m), False, y_out)


def _independent(A: np.ndarray, rows: np.ndarray, priority: np.ndarray) -> np.ndarray:
    # greedy Gram-Schmidt in priority order: a maximal independent subset
    # that keeps the most trusted rows
    n = A.shape[1]
    basis = np.empty((n, n))
    keep = []
    for i in rows[np.argsort(-priority[rows], kind="stable")]:
        a = A[i]
        k = len(keep)
        r = a - basis[:k].T @ (basis[:k] @ a) if k else a.copy()
        nr = math.sqrt(float(r @ r))
        if nr > 1e-9 * math.sqrt(float(a @ a)):
            basis[k] = r / nr
            keep.append(i)
            if k + 1 == n:
                break
    return np.sort(np.array(keep, dtype=int))


def _eq_solve(p: QpProblem, A: np.ndarray, rhs_b: np.ndarray):
    n, k = p.n, A.shape[0]
    delta = 1e-10
    K = np.block([[p.H + delta * np.eye(n), A.T], [A, -delta * np.eye(k)]])
    Kt = np.block([[p.H, A.T], [A, np.zeros((k, k))]])
    rhs = np.concatenate([-p.f, rhs_b])
    try:
        lu = sla.lu_factor(K, check_finite=False)
    except (sla.LinAlgError, ValueError):
        return None
    sol = sla.lu_solve(lu, rhs, check_finite=False)
    for _ in range(5):
        sol = sol + sla.lu_solve(lu, rhs - Kt @ sol, check_finite=False)
    return sol if np.all(np.isfinite(sol)) else None


def _polish(p: QpProblem, box: _Boxed, w, y, s: QpSettings, max_passes: int = 25):
    # Equality-constrained solves on a guessed active set, corrected for a
    # few passes (wrong-sign rows leave, violated rows join; one row at a
    # time after the first two passes to avoid cycling). Returns None
    # unless the result is primal feasible, stationary and dual feasible.
    n, m = p.n, box.A.shape[0]
    A = box.A
    eq = np.abs(box.u - box.l) < 1e-12
    Aw = A @ w
    tol = 1e-6 * max(1.0, np.abs(y).max(initial=0.0))
    # side: +1 upper bound active, -1 lower bound active, 0 inactive
    side = np.zeros(m, dtype=int)
    side[(y > tol) | (Aw >= box.u - 1e-7)] = 1
    low = np.isfinite(box.l) & ((y < -tol) | (Aw <= box.l + 1e-7))
    side[low & ((side == 0) | (y < 0))] = -1
    side[eq] = 1
    priority = np.abs(y).astype(float)
    priority[eq] = np.inf
    bump = priority[np.isfinite(priority)].max(initial=0.0) + 1.0
    scale_d = max(np.abs(p.f).max(initial=0.0), 1.0)
    for npass in range(max_passes):
        act = _independent(A, np.flatnonzero(side != 0), priority)
        sol = _eq_solve(p, A[act], np.where(side[act] > 0, box.u[act], box.l[act]))
        if sol is None:
            return None
        w_p = sol[:n]
        y_p = np.zeros(m)
        y_p[act] = sol[n:]
        Aw_p = A @ w_p
        wrong = ~eq & (((side > 0) & (y_p < 0)) | ((side < 0) & (y_p > 0)))
        off = np.ones(m, dtype=bool)
        off[act] = False
        over = off & (Aw_p > box.u + s.eps_abs)
        under = off & (Aw_p < box.l - s.eps_abs)
        r_prim = float(max(np.maximum(Aw_p - box.u, 0).max(initial=0.0),
                           np.maximum(box.l - Aw_p, 0).max(initial=0.0)))
        r_dual = float(np.abs(p.H @ w_p + p.f + A.T @ y_p).max(initial=0.0))
        scale_d = max(scale_d, np.abs(p.H @ w_p).max(initial=0.0))
        big = 1e-9 * max(1.0, np.abs(y_p).max(initial=0.0))
        if not np.any(np.abs(y_p[wrong]) > big) and r_prim <= s.eps_abs \
                and r_dual <= s.eps_abs + s.eps_rel * scale_d:
            y_p[wrong] = 0.0
            return w_p, y_p, r_prim, r_dual
        if not (wrong.any() or over.any() or under.any()):
            return None
        if npass < 2:
            side[wrong] = 0
            side[over] = 1
            side[under] = -1
            priority[over | under] = bump
            bump += 1.0
            continue
        viol = np.where(over, Aw_p - box.u, 0.0) + np.where(under, box.l - Aw_p, 0.0)
        if viol.max() > 0:
            i = int(np.argmax(viol))
            side[i] = 1 if over[i] else -1
            priority[i] = bump
            bump += 1.0
        else:
            i = int(np.argmax(np.where(wrong, np.abs(y_p), -1.0)))
            side[i] = 0
    return None
