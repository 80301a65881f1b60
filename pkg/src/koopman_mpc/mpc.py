"""Linear MPC on a (possibly lifted) predictor, condensed to a dense QP.

Both controllers share the same problem: quadratic output tracking, input
cost, soft output bounds with quadratically penalised slacks, and hard
input and input-rate bounds. They differ only in the predictor matrices.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import io
from .qp import MAX_ITERS, OPTIMAL, QpProblem, QpSettings, QpSolver
from .vehicle import NU, NX, LowSpeedError, VehicleParams, linearize, step


@dataclass
class MpcConfig:
    Qy: np.ndarray = field(default_factory=lambda: np.eye(NX))
    R: np.ndarray = field(default_factory=lambda: np.diag([0.0, 100.0, 30.0, 0.0]))
    S: np.ndarray = field(default_factory=lambda: 1e5 * np.eye(NX))
    N: int = 10
    y_min: np.ndarray = field(default_factory=lambda: -np.array([25.0, 2.0, 2.0]))
    y_max: np.ndarray = field(default_factory=lambda: np.array([25.0, 2.0, 2.0]))
    u_min: np.ndarray = field(default_factory=lambda: -np.array([0.0, 1.0, 0.45, 0.0]))
    u_max: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.45, 0.0]))
    du_min: np.ndarray = field(default_factory=lambda: -np.array([0.0, 0.1, 0.8, 0.0]))
    du_max: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.1, 0.8, 0.0]))

    def __post_init__(self):
        for name in ("Qy", "R", "S", "y_min", "y_max", "u_min", "u_max", "du_min", "du_max"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.N < 1:
            raise ValueError("horizon must be >= 1")
        for name in ("Qy", "R", "S"):
            M = getattr(self, name)
            if np.linalg.eigvalsh(0.5 * (M + M.T)).min() < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")
        for lo, hi in (("y_min", "y_max"), ("u_min", "u_max"), ("du_min", "du_max")):
            if np.any(getattr(self, lo) > getattr(self, hi)):
                raise ValueError(f"{lo} exceeds {hi}")

    def clip_input(self, u, u_prev) -> np.ndarray:
        """Project onto the hard input and rate bounds (rate relative to ``u_prev``)."""
        u_prev = np.asarray(u_prev, dtype=float)
        lo = np.maximum(self.u_min, u_prev + self.du_min)
        hi = np.minimum(self.u_max, u_prev + self.du_max)
        u = np.minimum(np.maximum(u, lo), hi)
        # u_prev + du rounds, so step inward until the rate check holds exactly
        for _ in range(4):
            over = u - u_prev > self.du_max
            under = u - u_prev < self.du_min
            if not (over.any() or under.any()):
                break
            u = np.where(over, np.nextafter(u, -np.inf), np.where(under, np.nextafter(u, np.inf), u))
        return u


@dataclass
class PredictorModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    c: np.ndarray | None = None

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape != (n, NU) or self.C.shape != (NX, n):
            raise ValueError("predictor dimensions inconsistent")
        if self.c is None:
            self.c = np.zeros(n)

    @property
    def n(self) -> int:
        return self.A.shape[0]


def _reference_matrix(ref, N: int) -> np.ndarray:
    ref = np.asarray(ref, dtype=float)
    if ref.ndim == 1:
        ref = np.tile(ref, (N, 1))
    if ref.shape != (N, NX):
        raise ValueError(f"reference must be (3,) or ({N}, 3), got {ref.shape}")
    return ref


def prediction_matrices(m: PredictorModel, N: int, z0):
    """Free response ``(N, ny)`` and block Toeplitz input map so that
    ``Y = free + Gamma @ U`` with ``Y`` stacking ``y_0..y_{N-1}``.

    ``y_0 = C z0`` does not depend on the inputs, and ``u_{N-1}`` reaches no
    output in the window.
    """
    ny = m.C.shape[0]
    free = np.empty((N, ny))
    CAkB = []
    z = np.asarray(z0, dtype=float)
    AkB = m.B.copy()
    for k in range(N):
        free[k] = m.C @ z
        z = m.A @ z + m.c
        CAkB.append(m.C @ AkB)
        AkB = m.A @ AkB
    Gamma = np.zeros((N * ny, N * NU))
    for row in range(1, N):
        for col in range(row):
            Gamma[row * ny:(row + 1) * ny, col * NU:(col + 1) * NU] = CAkB[row - col - 1]
    return free, Gamma


@dataclass
class CondensedQp:
    """Dense QP plus the bookkeeping to map its solution back to inputs.

    Input channels whose bounds coincide are fixed at that value and left
    out of the decision vector, so ``w = (U_free, s_0..s_{N-1})`` where
    ``U_free`` stacks the remaining channels of ``u_0..u_{N-1}`` and the
    slacks belong to ``y_0..y_{N-1}``.
    """
    qp: QpProblem
    N: int
    free: np.ndarray  # indices of the optimised input channels
    fixed: np.ndarray  # (NU,) values of the pinned channels (ignored elsewhere)

    @property
    def n_u(self) -> int:
        return self.N * self.free.size

    def inputs(self, w) -> np.ndarray:
        U = np.tile(self.fixed, (self.N, 1))
        U[:, self.free] = np.asarray(w)[:self.n_u].reshape(self.N, self.free.size)
        return U

    def slacks(self, w) -> np.ndarray:
        return np.asarray(w)[self.n_u:].reshape(self.N, NX)

    def pack(self, U, S) -> np.ndarray:
        return np.concatenate([np.asarray(U)[:, self.free].ravel(), np.asarray(S).ravel()])


def condense(m: PredictorModel, cfg: MpcConfig, z0, u_prev, ref) -> CondensedQp:
    """Condense the tracking problem over ``cfg.N`` steps into a dense QP.

    ``ref`` is a 3-vector held over the horizon or an ``(N, 3)`` preview.
    NaN reference entries mark un-tracked outputs; their cost weight is
    dropped for that step. Costs, soft bounds and slacks cover the
    outputs ``y_0..y_{N-1}``.
    """
    N = cfg.N
    ny = NX
    ref = _reference_matrix(ref, N)
    u_prev = np.asarray(u_prev, dtype=float)
    free_resp, Gamma_full = prediction_matrices(m, N, z0)

    pinned = cfg.u_min == cfg.u_max
    free = np.flatnonzero(~pinned)
    fixed = np.where(pinned, cfg.u_max, 0.0)
    nf = free.size
    cols = (np.arange(N)[:, None] * NU + free[None, :]).ravel()
    Gamma = Gamma_full[:, cols]
    yfree = free_resp.ravel() + Gamma_full @ np.tile(fixed, N)

    mask = ~np.isnan(ref)
    r = np.where(mask, ref, 0.0).ravel()
    Qbar = np.zeros((N * ny, N * ny))
    for k in range(N):
        Qbar[k * ny:(k + 1) * ny, k * ny:(k + 1) * ny] = cfg.Qy * np.outer(mask[k], mask[k])
    Rf = cfg.R[np.ix_(free, free)]
    Rbar = np.kron(np.eye(N), Rf)
    Sbar = np.kron(np.eye(N), cfg.S)

    nu_tot, ns = N * nf, N * ny
    n = nu_tot + ns
    H = np.zeros((n, n))
    H[:nu_tot, :nu_tot] = 2 * (Gamma.T @ Qbar @ Gamma + Rbar)
    H[nu_tot:, nu_tot:] = 2 * Sbar
    H = 0.5 * (H + H.T)
    f = np.zeros(n)
    f[:nu_tot] = 2 * Gamma.T @ Qbar @ (yfree - r)
    # the pinned channels' input cost is a constant and left out

    I_s = np.eye(ns)
    I_u = np.eye(nu_tot)
    D = np.eye(nu_tot) - np.eye(nu_tot, k=-nf)
    prev = np.zeros(nu_tot)
    prev[:nf] = u_prev[free]
    Z_us = np.zeros((nu_tot, ns))
    G = np.vstack([
        np.hstack([Gamma, -I_s]),
        np.hstack([-Gamma, -I_s]),
        np.hstack([I_u, Z_us]),
        np.hstack([-I_u, Z_us]),
        np.hstack([D, Z_us]),
        np.hstack([-D, Z_us]),
        np.hstack([np.zeros((ns, nu_tot)), -I_s]),
    ])
    h = np.concatenate([
        np.tile(cfg.y_max, N) - yfree,
        yfree - np.tile(cfg.y_min, N),
        np.tile(cfg.u_max[free], N),
        -np.tile(cfg.u_min[free], N),
        np.tile(cfg.du_max[free], N) + prev,
        -np.tile(cfg.du_min[free], N) - prev,
        np.zeros(ns),
    ])
    return CondensedQp(QpProblem(H, f, G, h), N, free, fixed)


@dataclass
class StepInfo:
    status: str
    iterations: int
    slack_max: float
    inputs: np.ndarray  # (N, 4) planned inputs
    slacks: np.ndarray  # (N, 3)


class MpcController:
    """Receding-horizon controller around a fixed predictor.

    ``lift_fn`` maps the measured plant state to the predictor state
    (identity for the 3-state baseline). Holds warm-start state, so use one
    instance per closed-loop run.
    """

    def __init__(self, model: PredictorModel, cfg: MpcConfig | None = None,
                 lift_fn: Callable | None = None, qp_settings: QpSettings | None = None,
                 warm_start: bool = True):
        self.model = model
        self.cfg = cfg or MpcConfig()
        self.lift_fn = lift_fn
        self.solver = QpSolver(qp_settings)
        self.warm_start = warm_start
        self._prev: tuple | None = None
        self.last: StepInfo | None = None

    def reset(self):
        self._prev = None
        self.last = None

    def _warm(self, cq: CondensedQp):
        if not self.warm_start or self._prev is None:
            return None
        U, S, y = self._prev
        # shift the previous plan one step and repeat its last entry
        U = np.vstack([U[1:], U[-1:]])
        S = np.vstack([S[1:], S[-1:]])
        w = cq.pack(U, S)
        return (w, None, y if y is not None and y.size else None)

    def __call__(self, x, u_prev, ref) -> np.ndarray:
        z0 = self.lift_fn(x) if self.lift_fn is not None else np.asarray(x, dtype=float)
        u_prev = np.asarray(u_prev, dtype=float)
        cq = condense(self.model, self.cfg, z0, u_prev, ref)
        sol = self.solver.solve(cq.qp, self._warm(cq))
        U, S = cq.inputs(sol.w), cq.slacks(sol.w)
        u0 = U[0]
        if not np.all(np.isfinite(u0)):
            u0 = u_prev
        u0 = self.cfg.clip_input(u0, u_prev)
        self._prev = (U, S, sol.row_duals) if np.all(np.isfinite(sol.w)) else None
        self.last = StepInfo(sol.status, sol.iterations, float(np.max(S)), U, S)
        return u0


def koopman_controller(model, cfg: MpcConfig | None = None, **kw) -> MpcController:
    """MPC on the lifted model; the plant state is re-lifted every step."""
    pm = PredictorModel(model.A, model.B, model.C)
    return MpcController(pm, cfg, lift_fn=model.lift, **kw)


def linear_controller(trim_state, trim_input, p: VehicleParams, Ts: float,
                      cfg: MpcConfig | None = None, **kw) -> MpcController:
    """MPC on a single affine linearisation of the plant at a fixed trim."""
    A, B, c = linearize(trim_state, trim_input, p, Ts)
    return MpcController(PredictorModel(A, B, np.eye(NX), c), cfg, **kw)


class RelinearizingController(MpcController):
    """Baseline variant that re-linearises at the current state each step."""

    def __init__(self, p: VehicleParams, Ts: float, cfg: MpcConfig | None = None, **kw):
        A, B, c = linearize((16.7, 0.0, 0.0), np.zeros(NU), p, Ts)
        super().__init__(PredictorModel(A, B, np.eye(NX), c), cfg, **kw)
        self.params, self.Ts = p, Ts

    def __call__(self, x, u_prev, ref):
        A, B, c = linearize(x, u_prev, self.params, self.Ts)
        self.model = PredictorModel(A, B, np.eye(NX), c)
        return super().__call__(x, u_prev, ref)


LOG_COLUMNS = ["t", "vx", "vy", "yaw_rate", "kappa_f", "kappa_r", "delta_f", "delta_r",
               "ref_vx", "ref_vy", "ref_yaw_rate", "slack_max", "qp_status", "qp_iters"]


@dataclass
class ClosedLoopLog:
    Ts: float
    states: np.ndarray  # (K+1, 3)
    inputs: np.ndarray  # (K, 4)
    refs: np.ndarray  # (K, 3), NaN where un-referenced
    qp_status: list[str]
    qp_iters: list[int]
    slack_max: np.ndarray
    terminated: str | None = None

    @property
    def t(self) -> np.ndarray:
        return self.Ts * np.arange(len(self.states))

    def to_csv(self) -> str:
        rows = []
        for k, x in enumerate(self.states):
            if k < len(self.inputs):
                r = [None if np.isnan(v) else v for v in self.refs[k]]
                tail = [*self.inputs[k], *r, self.slack_max[k], self.qp_status[k], self.qp_iters[k]]
            else:
                tail = [None] * (len(LOG_COLUMNS) - 4)
            rows.append([k * self.Ts, *x, *tail])
        return io.csv_text(LOG_COLUMNS, rows)

    @classmethod
    def from_csv(cls, text: str) -> "ClosedLoopLog":
        columns, rows = io.parse_csv(text)
        if columns != LOG_COLUMNS:
            raise ValueError(f"unexpected log columns {columns}")
        if not rows:
            raise ValueError("empty log")
        nan = float("nan")
        states = np.array([r[1:4] for r in rows], dtype=float)
        body = rows[:-1]
        inputs = np.array([r[4:8] for r in body], dtype=float).reshape(-1, NU)
        refs = np.array([[nan if v is None else v for v in r[8:11]] for r in body]).reshape(-1, NX)
        Ts = float(rows[1][0]) if len(rows) > 1 else 0.0
        return cls(Ts, states, inputs, refs, [str(r[12]) for r in body],
                   [int(r[13]) for r in body], np.array([r[11] for r in body], dtype=float))


def check_hard_constraints(log: ClosedLoopLog, cfg: MpcConfig, u_init=None, tol: float = 0.0) -> bool:
    """True if every applied input respects the input and rate bounds."""
    U = log.inputs
    if len(U) == 0:
        return True
    prev = np.vstack([np.zeros(NU) if u_init is None else u_init, U[:-1]])
    dU = U - prev
    return bool(np.all(U >= cfg.u_min - tol) and np.all(U <= cfg.u_max + tol)
                and np.all(dU >= cfg.du_min - tol) and np.all(dU <= cfg.du_max + tol))


def simulate_closed_loop(p: VehicleParams, controller, x0, ref, T_sim: float, Ts: float,
                         u_init=None) -> ClosedLoopLog:
    """Alternate controller and plant steps for ``T_sim`` seconds.

    ``ref`` is a 3-vector or a callable ``ref(t) -> 3-vector``; the
    controller sees the preview ``ref(t + m Ts)`` for ``m = 0..N-1`` and the
    log records ``ref(t)``. If the plant leaves the tire model's valid range
    the run stops early and the reason is recorded.
    """
    n_steps = T_sim / Ts
    if abs(n_steps - round(n_steps)) > 1e-9 * max(1.0, n_steps):
        raise ValueError("T_sim must be a multiple of Ts")
    n_steps = int(round(n_steps))
    cfg = getattr(controller, "cfg", None)
    N = cfg.N if cfg is not None else 1
    if callable(ref):
        ref_at = lambda t: np.asarray(ref(t), dtype=float)  # noqa: E731
    else:
        const = np.asarray(ref, dtype=float)
        ref_at = lambda t: const  # noqa: E731
    u_prev = np.zeros(NU) if u_init is None else np.asarray(u_init, dtype=float)
    states = [np.asarray(x0, dtype=float)]
    inputs, refs, status, iters, slacks = [], [], [], [], []
    terminated = None
    for k in range(n_steps):
        t = k * Ts
        preview = np.array([ref_at((k + m) * Ts) for m in range(N)]).reshape(N, NX)
        try:
            u = np.asarray(controller(states[-1], u_prev, preview), dtype=float)
        except LowSpeedError as exc:
            terminated = f"controller: {exc}"
            break
        info = getattr(controller, "last", None)
        try:
            x_next = step(states[-1], u, p, Ts)
        except LowSpeedError as exc:
            terminated = f"plant: {exc}"
            break
        inputs.append(u)
        refs.append(ref_at(t))
        status.append(info.status if info else OPTIMAL)
        iters.append(info.iterations if info else 0)
        slacks.append(info.slack_max if info else 0.0)
        states.append(x_next)
        u_prev = u
    return ClosedLoopLog(Ts, np.array(states), np.array(inputs).reshape(-1, NU),
                         np.array(refs).reshape(-1, NX), status, iters, np.array(slacks),
                         terminated)


def replay(log: ClosedLoopLog, p: VehicleParams) -> np.ndarray:
    """Re-simulate the logged inputs open loop."""
    out = [log.states[0]]
    for u in log.inputs:
        out.append(step(out[-1], u, p, log.Ts))
    return np.array(out)


__all__ = [
    "MpcConfig", "PredictorModel", "CondensedQp", "condense", "prediction_matrices", "MpcController",
    "koopman_controller", "linear_controller", "RelinearizingController",
    "ClosedLoopLog", "simulate_closed_loop", "check_hard_constraints", "replay",
    "MAX_ITERS", "OPTIMAL",
]
