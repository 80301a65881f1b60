"""Identification data: start points on a constant-energy surface and rollouts."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from . import io
from .config import format_config
from .vehicle import NU, NX, LowSpeedError, VehicleParams, kinetic_energy, step

DATASET_MAGIC = b"KMPCDSET"
CSV_COLUMNS = ["t", "vx", "vy", "yaw_rate", "kappa_f", "kappa_r", "delta_f", "delta_r", "traj_id"]

# Starts are drawn from the forward-driving cap vx >= VX_START_MIN so that
# the very first integration step is inside the tire model's valid range.
VX_START_MIN = 1.0


@dataclass
class GammaSet:
    points: np.ndarray  # (n, 3)
    energy: float

    def __len__(self):
        return len(self.points)


@dataclass
class Trajectory:
    states: np.ndarray  # (K+1, 3)
    inputs: np.ndarray  # (K, 4)
    Ts: float
    truncated: bool = False

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]

    @property
    def K(self) -> int:
        return len(self.inputs)


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    kind: str  # "uncontrolled" | "controlled"
    Ts: float
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def starts(self) -> np.ndarray:
        return np.array([t.x0 for t in self.trajectories]).reshape(-1, NX)

    @property
    def n_truncated(self) -> int:
        return sum(t.truncated for t in self.trajectories)

    def subset(self, idx) -> "Dataset":
        return Dataset([self.trajectories[i] for i in idx], self.kind, self.Ts, dict(self.config))


def _semi_axes(energy: float, p: VehicleParams):
    return math.sqrt(2 * energy / p.mass), math.sqrt(2 * energy / p.yaw_inertia)


def _cap_points(u: np.ndarray, energy: float, p: VehicleParams, vx_min: float) -> np.ndarray:
    # Area-uniform map of the unit square onto the unit-sphere cap
    # cos(theta) >= c_min around the vx axis, then scaled to the ellipsoid.
    a, c = _semi_axes(energy, p)
    c_min = min(vx_min / a, 1.0)
    cos_t = c_min + (1.0 - c_min) * u[:, 0]
    sin_t = np.sqrt(np.clip(1.0 - cos_t ** 2, 0.0, None))
    phi = 2.0 * np.pi * u[:, 1]
    pts = np.column_stack([a * cos_t, a * sin_t * np.cos(phi), c * sin_t * np.sin(phi)])
    # project out rounding so the energy constraint holds to machine precision
    return pts * np.sqrt(energy / kinetic_energy(pts, p))[:, None]


def in_sideslip_region(points) -> np.ndarray:
    """Mask of states with |vy| > |vx| (vehicle sliding sideways)."""
    points = np.asarray(points)
    return np.abs(points[:, 1]) > np.abs(points[:, 0])


def sample_gamma(energy: float, p: VehicleParams, n_base: int, densify_factor: float = 3.0,
                 seed: int = 0, vx_min: float = VX_START_MIN, n_total: int | None = None) -> GammaSet:
    """Quasi-uniform start points on the kinetic-energy ellipsoid.

    ``n_base`` scrambled-Halton points cover the forward cap uniformly by
    area. A further ``(densify_factor - 1) * n_base`` points are drawn from
    the same sequence and only those with |vy| > |vx| are kept, so that
    region ends up ``densify_factor`` times denser than the rest.

    With ``n_total`` the sideslip points are instead taken from the
    sequence until exactly ``n_total`` points exist in total.
    """
    if energy <= 0:
        raise ValueError("energy must be positive")
    if n_base < 1:
        raise ValueError("n_base must be >= 1")
    if densify_factor < 1:
        raise ValueError("densify_factor must be >= 1")
    if n_total is not None and n_total < n_base:
        raise ValueError("n_total must be >= n_base")
    sampler = qmc.Halton(d=2, scramble=True, seed=seed)
    base = _cap_points(sampler.random(n_base), energy, p, vx_min)
    if n_total is None:
        extra = int(round((densify_factor - 1.0) * n_base))
        more = _cap_points(sampler.random(extra), energy, p, vx_min) if extra else base[:0]
        more = more[in_sideslip_region(more)]
    else:
        chunks, count = [], 0
        while count < n_total - n_base:
            c = _cap_points(sampler.random(max(64, n_total - n_base)), energy, p, vx_min)
            c = c[in_sideslip_region(c)]
            chunks.append(c)
            count += len(c)
        more = np.vstack(chunks)[:n_total - n_base] if chunks else base[:0]
    return GammaSet(np.vstack([base, more]), float(energy))


def split_starts(points, holdout_fraction: float, seed: int = 0):
    """Random (train, test) partition of start points, made before any rollout
    so both datasets built from a start land on the same side."""
    points = np.asarray(points)
    if not 0.0 <= holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must be in [0, 1)")
    perm = np.random.default_rng(seed).permutation(len(points))
    n_test = int(round(holdout_fraction * len(points)))
    test = np.sort(perm[:n_test])
    train = np.sort(perm[n_test:])
    return points[train], points[test]


def sample_inside(energy: float, p: VehicleParams, n: int, seed: int = 0,
                  vx_min: float = VX_START_MIN) -> np.ndarray:
    """Random states strictly inside the energy ellipsoid with vx >= vx_min."""
    rng = np.random.default_rng(seed)
    a, c = _semi_axes(energy, p)
    out = []
    while len(out) < n:
        cand = rng.uniform(-1.0, 1.0, size=(4 * n, 3))
        cand = cand[np.sum(cand ** 2, axis=1) < 1.0] * np.array([a, a, c])
        cand = cand[cand[:, 0] >= vx_min]
        out.extend(cand)
    return np.array(out[:n])


def rollout(x0, inputs, p: VehicleParams, Ts: float) -> Trajectory:
    """Simulate through ``inputs``; stops at the last valid sample if the
    low-speed guard trips."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, NU)
    states = [np.asarray(x0, dtype=float)]
    for u in inputs:
        try:
            states.append(step(states[-1], u, p, Ts))
        except LowSpeedError:
            k = len(states) - 1
            return Trajectory(np.array(states), inputs[:k].copy(), Ts, truncated=True)
    return Trajectory(np.array(states), inputs.copy(), Ts)


def _n_steps(T: float, Ts: float) -> int:
    n = T / Ts
    if Ts <= 0 or abs(n - round(n)) > 1e-9 * max(1.0, n):
        raise ValueError(f"Ts={Ts} does not divide T={T}")
    return int(round(n))


def _collect(trajs, kind, Ts, config):
    # a trajectory needs at least one transition to be useful
    kept = [t for t in trajs if t.K >= 1]
    config = dict(config, dropped=len(trajs) - len(kept))
    return Dataset(kept, kind, Ts, config)


def generate_uncontrolled(starts, p: VehicleParams, Ts: float = 0.01, T: float = 0.5,
                          config: dict | None = None) -> Dataset:
    """Zero-input rollouts from every start point, ordered by start index."""
    starts = starts.points if isinstance(starts, GammaSet) else np.asarray(starts)
    K = _n_steps(T, Ts)
    zeros = np.zeros((K, NU))
    trajs = [rollout(x0, zeros, p, Ts) for x0 in starts]
    return _collect(trajs, "uncontrolled", Ts, dict(config or {}, T=T))


def random_inputs(rng: np.random.Generator, K: int, kappa_max: float = 1.0,
                  delta_max: float = math.radians(30.0)) -> np.ndarray:
    """Piecewise-constant random inputs: kappa_r and delta_f uniform, other slots zero."""
    u = np.zeros((K, NU))
    u[:, 1] = rng.uniform(-kappa_max, kappa_max, size=K)
    u[:, 2] = rng.uniform(-delta_max, delta_max, size=K)
    return u


def generate_controlled(starts, p: VehicleParams, Ts: float = 0.01, T: float = 0.1,
                        seed: int = 0, config: dict | None = None) -> Dataset:
    starts = starts.points if isinstance(starts, GammaSet) else np.asarray(starts)
    K = _n_steps(T, Ts)
    rng = np.random.default_rng(seed)
    # draw every input sequence first so truncation never shifts the stream
    all_inputs = [random_inputs(rng, K) for _ in range(len(starts))]
    trajs = [rollout(x0, u, p, Ts) for x0, u in zip(starts, all_inputs)]
    return _collect(trajs, "controlled", Ts, dict(config or {}, T=T, seed=seed))


def reject_low_speed(d: Dataset, threshold: float = 8.3) -> Dataset:
    """Drop trajectories whose start has Euclidean norm below ``threshold``."""
    keep = [i for i, t in enumerate(d.trajectories) if np.linalg.norm(t.x0) >= threshold]
    return d.subset(keep)


def save_dataset(d: Dataset, path) -> None:
    header = {
        "kind": d.kind,
        "Ts": d.Ts,
        "n_trajectories": len(d),
        "lengths": [t.K for t in d],
        "truncated": [bool(t.truncated) for t in d],
        "config": format_config(d.config),
    }
    arrays = {}
    for j, t in enumerate(d):
        arrays[f"states{j}"] = t.states
        arrays[f"inputs{j}"] = t.inputs
    io.write_container(path, DATASET_MAGIC, header, arrays)


def load_dataset(path) -> Dataset:
    from .config import parse_config

    header, arrays = io.read_container(path, DATASET_MAGIC)
    trajs = []
    for j, trunc in enumerate(header["truncated"]):
        trajs.append(Trajectory(arrays[f"states{j}"], arrays[f"inputs{j}"].reshape(-1, NU),
                                header["Ts"], trunc))
    config = {k: v for k, (v, _) in parse_config(header["config"]).items()}
    return Dataset(trajs, header["kind"], header["Ts"], config)


def dataset_csv(d: Dataset) -> str:
    rows = []
    for j, t in enumerate(d):
        for k, x in enumerate(t.states):
            u = t.inputs[k] if k < t.K else [None] * NU
            rows.append([k * t.Ts, *x, *u, j])
    return io.csv_text(CSV_COLUMNS, rows)
