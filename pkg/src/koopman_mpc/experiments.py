"""End-to-end pipeline steps and the two closed-loop scenarios.

Each ``run_*`` function reads and writes files in one output directory and
returns a small summary dict. :mod:`koopman_mpc.cli` wraps them as
command-line verbs; the demos call them directly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import dataset as ds
from . import io
from . import koopman as kp
from . import mpc
from .config import ConfigError, apply_config, format_config, load_config
from .vehicle import NU, VehicleParams

MANIFEST = "manifest.json"


@dataclass(frozen=True)
class ExperimentConfig:
    """Every tunable of the pipeline; vehicle parameters live separately."""

    energy: float = 5e5
    n_base: int = 200
    densify_factor: float = 3.0
    n_total: int = 0  # 0 keeps the densify rule; > 0 fixes the start count
    Ts: float = 0.01
    T_uncontrolled: float = 0.5
    T_controlled: float = 0.1
    holdout_fraction: float = 0.2
    reject_threshold: float = 8.3
    n_eigenvalues: int = 51
    zeta: float = 1e-12
    k_neighbors: int = 8
    greedy_eigenvalues: bool = False
    drift_vx: float = 2.0
    drift_vy: float = -27.66
    drift_yaw_rate: float = 0.0
    target_vx: float = 16.7
    spiral_ramp: float = 0.05
    spiral_yaw_rate_max: float = 0.5
    spiral_track_vy: bool = False
    T_sim: float = 10.0
    trim_vx: float = 16.7
    vy_tolerance: float = 0.5
    vx_tolerance: float = 1.0

    def replace(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.keys()}


PRESETS = {
    "desk": ExperimentConfig(),
    # full scale: 1078 start points
    "paper": ExperimentConfig(n_base=548, n_total=1078),
}


@dataclass
class Settings:
    experiment: ExperimentConfig
    vehicle: VehicleParams
    seed: int
    scale: str
    config_path: str | None = None

    def config_text(self) -> str:
        values = dict(self.experiment.as_dict())
        values.update({k: getattr(self.vehicle, k) for k in VehicleParams.keys()})
        return format_config(values)


def load_settings(config_path=None, scale: str = "desk", seed: int = 0) -> Settings:
    """Preset for ``scale`` with overrides from an optional config file.

    Keys may name either an :class:`ExperimentConfig` field or a
    :class:`~koopman_mpc.vehicle.VehicleParams` field.
    """
    if scale not in PRESETS:
        raise ConfigError(f"unknown scale {scale!r}; choose from {sorted(PRESETS)}")
    exp, veh = PRESETS[scale], VehicleParams()
    if config_path is not None:
        entries = load_config(config_path)
        exp_keys, veh_keys = set(ExperimentConfig.keys()), set(VehicleParams.keys())
        for key, (_, line) in entries.items():
            if key not in exp_keys and key not in veh_keys:
                raise ConfigError(f"unknown key {key!r}", config_path, line)
        exp = apply_config(exp, {k: v for k, v in entries.items() if k in exp_keys}, config_path)
        veh = apply_config(veh, {k: v for k, v in entries.items() if k in veh_keys}, config_path)
    _check(exp)
    return Settings(exp, veh, int(seed), scale, None if config_path is None else str(config_path))


def _check(c: ExperimentConfig) -> None:
    if c.T_sim <= 0:
        raise ConfigError("T_sim must be positive")
    if c.n_total and c.n_total < c.n_base:
        raise ConfigError("n_total must be 0 or >= n_base")
    if c.drift_vx < 0.5:
        raise ConfigError("drift start must satisfy vx >= 0.5")


def derived_seeds(seed: int) -> dict[str, int]:
    """Independent integer seeds for each random stage."""
    children = np.random.SeedSequence(seed).spawn(3)
    names = ("gamma", "inputs", "split")
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


# -- manifest ---------------------------------------------------------------

def _rel(path: Path, out_dir: Path) -> str:
    try:
        return str(Path(path).resolve().relative_to(out_dir.resolve()))
    except ValueError:
        return str(Path(path).resolve())


def record(out_dir, verb: str, settings: Settings, inputs, outputs) -> dict:
    """Add one command's entry (inputs, outputs, seed, config) to the manifest."""
    out_dir = Path(out_dir)
    path = out_dir / MANIFEST
    manifest = json.loads(path.read_text()) if path.exists() else {"commands": {}}
    manifest["commands"][verb] = {
        "seed": settings.seed,
        "scale": settings.scale,
        "config_file": settings.config_path,
        "config": settings.config_text(),
        "inputs": {_rel(p, out_dir): io.sha256(p) for p in inputs},
        "outputs": {_rel(p, out_dir): io.sha256(p) for p in outputs},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# -- data and identification ------------------------------------------------

DATA_FILES = {
    ("uncontrolled", "train"): "uncontrolled.kmds",
    ("controlled", "train"): "controlled.kmds",
    ("uncontrolled", "test"): "uncontrolled_test.kmds",
    ("controlled", "test"): "controlled_test.kmds",
}
MODEL_FILE = "model.kmpc"


def start_points(settings: Settings) -> tuple[np.ndarray, np.ndarray]:
    c, seeds = settings.experiment, derived_seeds(settings.seed)
    gamma = ds.sample_gamma(c.energy, settings.vehicle, c.n_base, c.densify_factor,
                            seed=seeds["gamma"], n_total=c.n_total or None)
    return ds.split_starts(gamma.points, c.holdout_fraction, seeds["split"])


def run_generate(settings: Settings, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    c, p = settings.experiment, settings.vehicle
    seeds = derived_seeds(settings.seed)
    train, test = start_points(settings)
    meta = {"seed": settings.seed}
    written, summary = [], {}
    for part, starts, offset in (("train", train, 0), ("test", test, 1)):
        unc = ds.generate_uncontrolled(starts, p, c.Ts, c.T_uncontrolled, dict(meta, part=part))
        ctl = ds.generate_controlled(starts, p, c.Ts, c.T_controlled, seeds["inputs"] + offset,
                                     dict(meta, part=part))
        for kind, d in (("uncontrolled", unc), ("controlled", ctl)):
            path = out_dir / DATA_FILES[(kind, part)]
            ds.save_dataset(d, path)
            written.append(path)
            summary[f"{kind}_{part}"] = len(d)
            summary[f"{kind}_{part}_truncated"] = d.n_truncated
    record(out_dir, "generate", settings, [], written)
    return summary


def _load(out_dir: Path, kind: str, part: str) -> tuple[ds.Dataset, Path]:
    path = out_dir / DATA_FILES[(kind, part)]
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run 'generate' first")
    return ds.load_dataset(path), path


def evaluation_summary(m: kp.KoopmanModel, unc: ds.Dataset, ctl: ds.Dataset,
                       reject_threshold: float) -> dict:
    """Mean and std of RMSE% on both datasets after the low-speed rejection rule."""
    out = {}
    for kind, d in (("uncontrolled", unc), ("controlled", ctl)):
        kept = ds.reject_low_speed(d, reject_threshold)
        err = kp.evaluate(m, kept) if len(kept) else np.array([])
        out[kind] = {
            "n": int(err.size),
            "mean": float(err.mean()) if err.size else float("nan"),
            "std": float(err.std()) if err.size else float("nan"),
            "median": float(np.median(err)) if err.size else float("nan"),
            "errors": err,
            "starts": kept.starts,
        }
    return out


def _report_lines(title: str, summary: dict) -> list[str]:
    lines = [title]
    for kind, s in summary.items():
        lines.append(f"{kind}: n={s['n']} mean_rmse_percent={s['mean']:.6g} "
                     f"std_rmse_percent={s['std']:.6g} median_rmse_percent={s['median']:.6g}")
    return lines


def run_identify(settings: Settings, out_dir) -> dict:
    out_dir = Path(out_dir)
    c = settings.experiment
    unc, p_unc = _load(out_dir, "uncontrolled", "train")
    ctl, p_ctl = _load(out_dir, "controlled", "train")
    unc_t, p_unc_t = _load(out_dir, "uncontrolled", "test")
    ctl_t, p_ctl_t = _load(out_dir, "controlled", "test")
    report: dict = {}
    m = kp.identify(unc, ctl, c.n_eigenvalues, c.zeta, c.k_neighbors,
                    c.greedy_eigenvalues, report)
    model_path = out_dir / MODEL_FILE
    kp.save_model(m, model_path)
    held = evaluation_summary(m, unc_t, ctl_t, c.reject_threshold)
    lines = [
        f"n_trajectories_uncontrolled = {len(unc)}",
        f"n_trajectories_controlled = {len(ctl)}",
        f"n_eigenvalues = {m.eigenvalues.size}",
        f"lifted_dimension = {m.n_lifted}",
        f"g_ridge_residual = {report['g_residual']:.17g}",
        f"B_rank = {' '.join(map(str, report['B_rank']))}",
        f"B_condition = {' '.join(f'{v:.6g}' for v in report['B_cond'])}",
        *_report_lines("held-out prediction error (RMSE %):", held),
    ]
    report_path = out_dir / "identify_report.txt"
    report_path.write_text("\n".join(lines) + "\n")
    record(out_dir, "identify", settings, [p_unc, p_ctl, p_unc_t, p_ctl_t],
           [model_path, report_path])
    return {"model": str(model_path), "held_out": {k: {kk: v[kk] for kk in ("n", "mean", "std")}
                                                   for k, v in held.items()}}


def _model(out_dir: Path) -> tuple[kp.KoopmanModel, Path]:
    path = out_dir / MODEL_FILE
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run 'identify' first")
    return kp.load_model(path), path


def run_evaluate(settings: Settings, out_dir) -> dict:
    out_dir = Path(out_dir)
    m, p_model = _model(out_dir)
    unc_t, p_unc_t = _load(out_dir, "uncontrolled", "test")
    ctl_t, p_ctl_t = _load(out_dir, "controlled", "test")
    held = evaluation_summary(m, unc_t, ctl_t, settings.experiment.reject_threshold)
    rows = []
    for kind, s in held.items():
        for x0, e in zip(s["starts"], s["errors"]):
            rows.append([kind, *x0, e])
    csv_path = out_dir / "evaluation.csv"
    csv_path.write_text(io.csv_text(["dataset", "vx0", "vy0", "yaw_rate0", "rmse_percent"], rows))
    report_path = out_dir / "evaluation_report.txt"
    report_path.write_text("\n".join(_report_lines("held-out prediction error (RMSE %):", held)) + "\n")
    record(out_dir, "evaluate", settings, [p_model, p_unc_t, p_ctl_t], [csv_path, report_path])
    return {k: {kk: v[kk] for kk in ("n", "mean", "std", "median")} for k, v in held.items()}


# -- closed-loop scenarios ----------------------------------------------------

@dataclass
class ScenarioSpec:
    name: str
    x0: tuple[float, float, float]
    reference: Callable[[float], np.ndarray]  # t -> (vx, vy, yaw_rate), NaN = free
    T_sim: float
    controllers: tuple[str, ...] = ("koopman", "linear")

    def __post_init__(self):
        if self.T_sim <= 0:
            raise ValueError("T_sim must be positive")
        if self.x0[0] < 0.5:
            raise ValueError("start state is below the low-speed guard")


def drift_scenario(c: ExperimentConfig) -> ScenarioSpec:
    target = np.array([c.target_vx, 0.0, 0.0])
    return ScenarioSpec("drift", (c.drift_vx, c.drift_vy, c.drift_yaw_rate),
                        lambda t: target, c.T_sim)


def spiral_scenario(c: ExperimentConfig) -> ScenarioSpec:
    vy = 0.0 if c.spiral_track_vy else float("nan")

    def ref(t):
        return np.array([c.target_vx, vy, min(c.spiral_ramp * t, c.spiral_yaw_rate_max)])

    return ScenarioSpec("spiral", (c.target_vx, 0.0, 0.0), ref, c.T_sim)


def make_controller(kind: str, m: kp.KoopmanModel | None, settings: Settings):
    c = settings.experiment
    if kind == "koopman":
        return mpc.koopman_controller(m)
    if kind == "linear":
        return mpc.linear_controller((c.trim_vx, 0.0, 0.0), np.zeros(NU), settings.vehicle, c.Ts)
    raise ValueError(f"unknown controller {kind!r}")


def first_time(mask: np.ndarray, Ts: float) -> float | None:
    hits = np.flatnonzero(mask)
    return float(hits[0] * Ts) if hits.size else None


def log_metrics(log: mpc.ClosedLoopLog, cfg: mpc.MpcConfig, target_vx: float,
                vy_tol: float = 0.5, vx_tol: float = 1.0) -> dict:
    Y = log.refs
    X = log.states[:len(Y)]  # state and reference at the same instant
    out = {
        "steps": len(log.inputs),
        "terminated": log.terminated,
        "time_vy_settled": first_time(np.abs(log.states[:, 1]) <= vy_tol, log.Ts),
        "time_vx_settled": first_time(np.abs(log.states[:, 0] - target_vx) <= vx_tol, log.Ts),
        "initial_steering": float(log.inputs[0, 2]) if len(log.inputs) else None,
        "initial_steering_sign": int(np.sign(log.inputs[0, 2])) if len(log.inputs) else 0,
        "hard_constraints_ok": mpc.check_hard_constraints(log, cfg),
        "qp_not_optimal": int(sum(s != mpc.OPTIMAL for s in log.qp_status)),
        "qp_iters_max": int(max(log.qp_iters, default=0)),
        "slack_max": float(log.slack_max.max(initial=0.0)),
        "final_vx": float(log.states[-1, 0]),
    }
    for j, name in enumerate(("vx", "vy", "yaw_rate")):
        tracked = ~np.isnan(Y[:, j])
        err = X[tracked, j] - Y[tracked, j]
        out[f"rmse_{name}"] = float(np.sqrt(np.mean(err ** 2))) if err.size else None
    return out


def run_scenario(spec: ScenarioSpec, settings: Settings, m: kp.KoopmanModel | None,
                 out_dir=None) -> dict:
    """Closed loop for each controller of ``spec``; failures are recorded per
    controller and do not stop the others."""
    c = settings.experiment
    results, written = {}, []
    for kind in spec.controllers:
        try:
            ctl = make_controller(kind, m, settings)
            log = mpc.simulate_closed_loop(settings.vehicle, ctl, spec.x0, spec.reference,
                                           spec.T_sim, c.Ts)
            metrics = log_metrics(log, ctl.cfg, c.target_vx, c.vy_tolerance, c.vx_tolerance)
            if out_dir is not None:
                path = Path(out_dir) / f"{spec.name}_{kind}.csv"
                path.write_text(log.to_csv())
                written.append(path)
            results[kind] = {"metrics": metrics, "log": log}
        except Exception as exc:  # keep going with the other controller
            results[kind] = {"error": f"{type(exc).__name__}: {exc}"}
    if out_dir is not None:
        path = Path(out_dir) / f"{spec.name}_metrics.json"
        path.write_text(json.dumps({k: v.get("metrics", v) for k, v in results.items()},
                                   indent=2, sort_keys=True) + "\n")
        written.append(path)
    results["_written"] = written
    return results


def _run_named(name: str, settings: Settings, out_dir) -> dict:
    out_dir = Path(out_dir)
    m, p_model = _model(out_dir)
    spec = {"drift": drift_scenario, "spiral": spiral_scenario}[name](settings.experiment)
    res = run_scenario(spec, settings, m, out_dir)
    record(out_dir, name, settings, [p_model], res.pop("_written"))
    return {k: v.get("metrics", v) for k, v in res.items()}


def run_drift(settings: Settings, out_dir) -> dict:
    return _run_named("drift", settings, out_dir)


def run_spiral(settings: Settings, out_dir) -> dict:
    return _run_named("spiral", settings, out_dir)


COMPARE_COLUMNS = ["scenario", "controller", "steps", "time_vy_settled", "time_vx_settled",
                   "initial_steering", "final_vx", "rmse_vx", "rmse_vy", "rmse_yaw_rate",
                   "hard_constraints_ok", "qp_not_optimal"]


def run_compare(settings: Settings, out_dir) -> dict:
    """Side-by-side metrics from the scenario logs (run first if missing)."""
    out_dir = Path(out_dir)
    c = settings.experiment
    cfg = mpc.MpcConfig()
    rows, inputs, table = [], [], {}
    for name in ("drift", "spiral"):
        if not all((out_dir / f"{name}_{k}.csv").exists() for k in ("koopman", "linear")):
            _run_named(name, settings, out_dir)
        for kind in ("koopman", "linear"):
            path = out_dir / f"{name}_{kind}.csv"
            inputs.append(path)
            log = mpc.ClosedLoopLog.from_csv(path.read_text())
            met = log_metrics(log, cfg, c.target_vx, c.vy_tolerance, c.vx_tolerance)
            table[(name, kind)] = met
            rows.append([name, kind] + [_cell(met[k]) for k in COMPARE_COLUMNS[2:]])
    path = out_dir / "compare.csv"
    path.write_text(io.csv_text(COMPARE_COLUMNS, rows))
    record(out_dir, "compare", settings, inputs, [path])
    return {f"{s}/{k}": v for (s, k), v in table.items()}


def _cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return v


VERBS = {
    "generate": run_generate,
    "identify": run_identify,
    "evaluate": run_evaluate,
    "drift": run_drift,
    "spiral": run_spiral,
    "compare": run_compare,
}
