"""Eigenfunction-based linear predictor ``z+ = A z + B u, y = C z``.

Each lifted coordinate is an eigenfunction sampled along data trajectories,
``phi(x_k^j) = lambda^k g(x_0^j)``. With one block of eigenvalues per
output, ``A`` is diagonal and ``C`` just sums each block. Only the start
values ``g`` are fitted (ridge least squares per trajectory); ``B`` is
fitted afterwards on multi-step predictions of a controlled dataset.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import io
from .dataset import Dataset
from .vehicle import NU, NX

MODEL_MAGIC = b"KMPCMODL"


def select_eigenvalues(n: int = 51, Ts: float = 0.01, dataset: Dataset | None = None,
                       zeta: float = 1e-12, tau_range=(0.02, 5.0),
                       n_candidates: int = 500) -> np.ndarray:
    """Real eigenvalues in (0, 1], sorted in decreasing order.

    The default set is a constant mode (1.0) plus ``n - 1`` decay rates
    ``exp(-Ts / tau)`` with ``tau`` log-spaced over ``tau_range``.

    If ``dataset`` is given, a greedy search over ``n_candidates`` grid
    values (same tau range, plus 1.0) adds at each round the candidate that
    most reduces the total ridge residual. The default set is returned
    instead whenever it fits the dataset better, so refinement never
    increases the residual.
    """
    if n < 2:
        raise ValueError("need at least 2 eigenvalues")
    taus = np.geomspace(tau_range[0], tau_range[1], n - 1)
    default = np.sort(np.concatenate([[1.0], np.exp(-Ts / taus)]))[::-1]
    if dataset is None:
        return default

    grid = np.concatenate([[1.0], np.exp(-Ts / np.geomspace(*tau_range, n_candidates - 1))])
    groups = _group_by_length(dataset)
    chosen: list[int] = []
    remaining = list(range(len(grid)))
    for _ in range(n):
        scores = [ridge_residual(groups, grid[chosen + [c]], zeta) for c in remaining]
        best = remaining[int(np.argmin(scores))]
        chosen.append(best)
        remaining.remove(best)
    greedy = np.sort(grid[chosen])[::-1]
    if ridge_residual(groups, default, zeta) < ridge_residual(groups, greedy, zeta):
        return default
    return greedy


def check_eigenvalues(lambdas) -> np.ndarray:
    lam = np.asarray(lambdas, dtype=float)
    if lam.ndim != 1 or lam.size == 0:
        raise ValueError("eigenvalues must be a non-empty 1-D array")
    if np.any(lam <= 0) or np.any(lam > 1):
        raise ValueError("eigenvalues must lie in (0, 1]")
    if np.any(np.diff(lam) >= 0):
        raise ValueError("eigenvalues must be strictly decreasing")
    return lam


def powers(lambdas, K: int) -> np.ndarray:
    """Matrix ``L[k, i] = lambda_i ** k`` for ``k = 0..K-1``."""
    return np.asarray(lambdas, dtype=float)[None, :] ** np.arange(K)[:, None]


def _ridge(L: np.ndarray, F: np.ndarray, zeta: float) -> np.ndarray:
    # Augmented least squares [L; sqrt(zeta) I] g = [F; 0]; avoids squaring
    # the condition number of the Vandermonde-like L.
    n = L.shape[1]
    if zeta > 0:
        L = np.vstack([L, np.sqrt(zeta) * np.eye(n)])
        F = np.vstack([F, np.zeros((n, F.shape[1]))])
    g, *_ = np.linalg.lstsq(L, F, rcond=None)
    return g


def _group_by_length(d: Dataset) -> list[tuple[np.ndarray, np.ndarray]]:
    # (trajectory indices, stacked outputs (n_samples, NX * n_traj)) per length
    by_len: dict[int, list[int]] = {}
    for j, t in enumerate(d):
        by_len.setdefault(len(t.states), []).append(j)
    groups = []
    for length in sorted(by_len):
        idx = np.array(by_len[length])
        F = np.concatenate([d.trajectories[j].states for j in idx], axis=1)
        groups.append((idx, F))
    return groups


def ridge_residual(groups, lambdas, zeta: float) -> float:
    """Total ridge objective ``sum ||L g - F||^2 + zeta ||g||^2`` at the optimum."""
    total = 0.0
    for _, F in groups:
        L = powers(lambdas, F.shape[0])
        g = _ridge(L, F, zeta)
        total += float(np.sum((L @ g - F) ** 2) + zeta * np.sum(g ** 2))
    return total


def fit_g(d: Dataset, lambdas, zeta: float = 1e-12) -> np.ndarray:
    """Eigenfunction start values, array ``g[p, i, j]`` (output, eigenvalue, trajectory).

    Each trajectory and output is an independent ridge problem
    ``min ||L g - F||^2 + zeta ||g||^2`` where ``F`` holds that output's
    samples; trajectories of equal length share ``L`` and are solved
    together.
    """
    lam = check_eigenvalues(lambdas)
    if len(d) == 0:
        raise ValueError("empty dataset")
    if zeta < 0:
        raise ValueError("zeta must be non-negative")
    g = np.empty((NX, lam.size, len(d)))
    for idx, F in _group_by_length(d):
        if F.shape[0] < 2:
            raise ValueError("trajectories need at least 2 samples")
        if not np.all(np.isfinite(F)):
            raise ValueError("non-finite trajectory data")
        sol = _ridge(powers(lam, F.shape[0]), F, zeta)  # (N_lambda, NX * n)
        g[:, :, idx] = sol.reshape(lam.size, len(idx), NX).transpose(2, 0, 1)
    if not np.all(np.isfinite(g)):
        raise ValueError("ridge fit produced non-finite coefficients")
    return g


def assemble_AC(lambdas, n_outputs: int = NX) -> tuple[np.ndarray, np.ndarray]:
    lam = np.asarray(lambdas, dtype=float)
    A = np.diag(np.tile(lam, n_outputs))
    C = np.kron(np.eye(n_outputs), np.ones((1, lam.size)))
    return A, C


@dataclass
class LiftTable:
    """Lifted vectors at every stored trajectory sample.

    ``z`` is laid out block-major: coordinate ``p * N_lambda + i`` belongs
    to output ``p`` and eigenvalue ``i``. ``traj`` and ``k`` index each
    row's trajectory and time step.
    """

    points: np.ndarray
    z: np.ndarray
    traj: np.ndarray
    k: np.ndarray
    k_neighbors: int = 8
    power: float = 2.0
    _tree: cKDTree | None = field(default=None, init=False, repr=False)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def __len__(self):
        return len(self.points)


def build_lift_table(d: Dataset, lambdas, g: np.ndarray, k_neighbors: int = 8,
                     power: float = 2.0) -> LiftTable:
    lam = np.asarray(lambdas, dtype=float)
    if g.shape != (NX, lam.size, len(d)):
        raise ValueError(f"g has shape {g.shape}, expected {(NX, lam.size, len(d))}")
    a = np.tile(lam, NX)
    points, zs, traj, ks = [], [], [], []
    for j, t in enumerate(d):
        n = len(t.states)
        # recursion rather than powers, so z_{k+1} == a * z_k holds bit for bit
        z = np.empty((n, a.size))
        z[0] = g[:, :, j].ravel()
        for k in range(1, n):
            z[k] = a * z[k - 1]
        points.append(t.states)
        zs.append(z)
        traj.append(np.full(n, j))
        ks.append(np.arange(n))
    return LiftTable(np.vstack(points), np.vstack(zs), np.concatenate(traj),
                     np.concatenate(ks), k_neighbors, power)


def lift(x, table: LiftTable, k_neighbors: int | None = None, power: float | None = None) -> np.ndarray:
    """Inverse-distance-weighted average of the nearest table vectors.

    A query closer than 1e-12 to a stored point returns that point's vector
    unchanged.
    """
    if len(table) == 0:
        raise ValueError("empty lift table")
    k = min(k_neighbors or table.k_neighbors, len(table))
    power = table.power if power is None else power
    dist, idx = table.tree.query(np.asarray(x, dtype=float), k=k)
    dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
    if dist[0] < 1e-12:
        return table.z[idx[0]].copy()
    w = 1.0 / dist ** power
    w /= w.sum()
    return w @ table.z[idx]


def _input_response(lam_full: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    # W[k, c, q] = sum_{i<k} u_i[c] a_q^(k-i-1), for k = 0..K
    K = len(inputs)
    W = np.zeros((K + 1, inputs.shape[1], lam_full.size))
    for k in range(1, K + 1):
        W[k] = W[k - 1] * lam_full + inputs[k - 1][:, None]
    return W


def fit_B(d: Dataset, A: np.ndarray, C: np.ndarray, lift_fn, info: dict | None = None) -> np.ndarray:
    """Least-squares ``B`` for multi-step output predictions.

    Minimises ``sum_j sum_k ||x_k^j - yhat_k||^2`` with
    ``yhat_k = C A^k z0 + sum_{i<k} C A^(k-i-1) B u_i`` and ``z0 = lift_fn(x_0^j)``.
    The residual is linear in ``B``; because ``C`` is block-diagonal the
    rows of ``B`` feeding each output form a separate problem, each solved
    with an SVD-based minimum-norm least-squares routine.

    Input channels that are zero throughout the data carry no information
    and get an exactly zero column. If ``info`` is given it receives
    singular-value diagnostics.
    """
    a = np.diag(A).copy()
    if not np.allclose(A, np.diag(a)):
        raise ValueError("A must be diagonal")
    n_y, n = C.shape
    blocks = [np.flatnonzero(C[p]) for p in range(n_y)]
    rows = [[] for _ in range(n_y)]
    rhs = [[] for _ in range(n_y)]
    excited = np.zeros(NU, dtype=bool)
    for t in d:
        excited |= np.any(t.inputs != 0, axis=0)
    cols = np.flatnonzero(excited)
    for t in d:
        if t.K == 0:
            continue
        z0 = np.asarray(lift_fn(t.x0), dtype=float)
        W = _input_response(a, t.inputs)
        free = (a[None, :] ** np.arange(t.K + 1)[:, None]) * z0  # A^k z0
        for p, blk in enumerate(blocks):
            # unknowns: B[blk, c] for c in inputs, ordered (c, q)
            rows[p].append(W[1:, cols][:, :, blk].reshape(t.K, -1))
            rhs[p].append(t.states[1:, p] - free[1:, blk] @ C[p, blk])
    B = np.zeros((n, NU))
    if info is not None:
        info.update(rank=[], cond=[], singular_values=[], excited=cols.tolist())
    for p, blk in enumerate(blocks):
        if not rows[p]:
            continue
        Phi = np.vstack(rows[p])
        y = np.concatenate(rhs[p])
        sol, _, rank, sv = np.linalg.lstsq(Phi, y, rcond=None)
        B[np.ix_(blk, cols)] = sol.reshape(cols.size, blk.size).T
        if info is not None:
            nz = sv[sv > sv[0] * 1e-12] if sv.size and sv[0] > 0 else sv[:0]
            info["rank"].append(int(rank))
            info["cond"].append(float(nz[0] / nz[-1]) if nz.size else float("inf"))
            info["singular_values"].append(sv)
    return B


def multistep_objective(d: Dataset, A, B, C, lift_fn) -> float:
    """Value of the multi-step fitting objective for a given ``B``."""
    total = 0.0
    for t in d:
        yhat = predict_matrices(A, B, C, lift_fn(t.x0), t.inputs)
        total += float(np.sum((yhat[1:] - t.states[1:]) ** 2))
    return total


def predict_matrices(A, B, C, z0, inputs) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=float).reshape(-1, B.shape[1])
    z = np.asarray(z0, dtype=float).copy()
    out = [C @ z]
    for u in inputs:
        z = A @ z + B @ u
        out.append(C @ z)
    return np.array(out)


@dataclass
class KoopmanModel:
    eigenvalues: np.ndarray
    B: np.ndarray
    table: LiftTable
    Ts: float
    n_outputs: int = NX

    def __post_init__(self):
        self.A, self.C = assemble_AC(self.eigenvalues, self.n_outputs)
        self._a = np.diag(self.A).copy()

    @property
    def n_lifted(self) -> int:
        return self.A.shape[0]

    def lift(self, x) -> np.ndarray:
        return lift(x, self.table)

    def predict(self, z0, inputs) -> np.ndarray:
        return predict(self, z0, inputs)


def predict(m: KoopmanModel, z0, inputs) -> np.ndarray:
    """Outputs ``y_0..y_K`` of the lifted model driven by ``inputs`` (K, 4)."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, NU)
    z = np.asarray(z0, dtype=float).copy()
    out = np.empty((len(inputs) + 1, m.n_outputs))
    out[0] = m.C @ z
    for k, u in enumerate(inputs):
        z = m._a * z + m.B @ u
        out[k + 1] = m.C @ z
    return out


def rmse_percent(truth, predicted) -> float:
    truth = np.asarray(truth, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if truth.shape != predicted.shape:
        raise ValueError("shape mismatch")
    norm = np.linalg.norm(truth)
    if norm == 0:
        raise ValueError("true trajectory has zero norm")
    return 100.0 * float(np.linalg.norm(predicted - truth) / norm)


def evaluate(m: KoopmanModel, d: Dataset) -> np.ndarray:
    """Per-trajectory RMSE% of predictions started from ``lift(x0)``."""
    errs = []
    for t in d:
        errs.append(rmse_percent(t.states, predict(m, m.lift(t.x0), t.inputs)))
    return np.array(errs)


def identify(uncontrolled: Dataset, controlled: Dataset, n_eigenvalues: int = 51,
             zeta: float = 1e-12, k_neighbors: int = 8, greedy: bool = False,
             report: dict | None = None) -> KoopmanModel:
    """Full pipeline: eigenvalues, g fit, lift table, then B."""
    Ts = uncontrolled.Ts
    lam = select_eigenvalues(n_eigenvalues, Ts, uncontrolled if greedy else None, zeta)
    g = fit_g(uncontrolled, lam, zeta)
    table = build_lift_table(uncontrolled, lam, g, k_neighbors)
    A, C = assemble_AC(lam)
    info = {}
    B = fit_B(controlled, A, C, lambda x: lift(x, table), info)
    if report is not None:
        groups = _group_by_length(uncontrolled)
        report["g_residual"] = ridge_residual(groups, lam, zeta)
        report["B_rank"] = info["rank"]
        report["B_cond"] = info["cond"]
    return KoopmanModel(lam, B, table, Ts)


def save_model(m: KoopmanModel, path) -> None:
    header = {
        "Ts": m.Ts,
        "n_outputs": m.n_outputs,
        "n_eigenvalues": int(m.eigenvalues.size),
        "k_neighbors": m.table.k_neighbors,
        "power": m.table.power,
    }
    arrays = {
        "eigenvalues": m.eigenvalues,
        "B": m.B,
        "points": m.table.points,
        "z": m.table.z,
        "traj": m.table.traj.astype(float),
        "k": m.table.k.astype(float),
    }
    io.write_container(path, MODEL_MAGIC, header, arrays)


def load_model(path) -> KoopmanModel:
    h, a = io.read_container(path, MODEL_MAGIC)
    table = LiftTable(a["points"], a["z"], a["traj"].astype(int), a["k"].astype(int),
                      h["k_neighbors"], h["power"])
    return KoopmanModel(a["eigenvalues"], a["B"], table, h["Ts"], h["n_outputs"])
