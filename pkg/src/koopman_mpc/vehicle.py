"""Single-track vehicle model with magic-formula tires.

State vector ``x = (vx, vy, yaw_rate)`` and input vector
``u = (kappa_f, kappa_r, delta_f, delta_r)``. The model carries four wheels
(front-left, front-right, rear-left, rear-right) where the left and right
wheels of an axle sit at the same point.

The discrete plant used everywhere else in the package is :func:`step`, a
classical RK4 advance of :func:`derivatives` with the input held constant
over the sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np

GRAVITY = 9.81
MIN_VX = 0.5

NX = 3
NU = 4


class LowSpeedError(ValueError):
    """Raised when |vx| is too small for the slip-angle definitions."""


class VehicleState(NamedTuple):
    vx: float
    vy: float
    yaw_rate: float


class ControlInput(NamedTuple):
    kappa_f: float = 0.0
    kappa_r: float = 0.0
    delta_f: float = 0.0
    delta_r: float = 0.0


@dataclass(frozen=True)
class TireCoeffs:
    """Magic-formula coefficients: stiffness B, shape C, peak D [N], curvature E."""

    B: float
    C: float
    D: float
    E: float

    def check(self):
        if not (self.B > 0 and 0 < self.C < 3 and self.D > 0 and self.E <= 1):
            raise ValueError(f"tire coefficients out of range: {self}")


@dataclass(frozen=True)
class VehicleParams:
    """Chassis and tire parameters.

    Tire peak values are given as friction-like multipliers of the static
    per-wheel load; the absolute ``D`` values are derived per axle.
    Setting ``cos_formula`` switches the tire curve to the cosine variant
    (for comparison only, it yields force at zero slip).
    """

    mass: float = 1300.0
    yaw_inertia: float = 1600.0
    l_v: float = 1.2
    l_h: float = 1.3
    drag_coeff: float = 0.35
    air_density: float = 1.225
    frontal_area: float = 2.0
    lat_B: float = 10.0
    lat_C: float = 1.9
    lat_mu: float = 1.2
    lat_E: float = 0.97
    lon_B: float = 12.0
    lon_C: float = 1.65
    lon_mu: float = 1.1
    lon_E: float = 0.95
    cos_formula: bool = False
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("mass", "yaw_inertia", "l_v", "l_h"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        for name in ("drag_coeff", "air_density", "frontal_area", "lat_mu", "lon_mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def wheelbase(self) -> float:
        return self.l_v + self.l_h

    def static_load(self, axle: str) -> float:
        """Static vertical load on one wheel of the given axle ('front' or 'rear')."""
        other = self.l_h if axle == "front" else self.l_v
        return self.mass * GRAVITY * other / (2.0 * self.wheelbase)

    @property
    def drag_factor(self) -> float:
        return 0.5 * self.drag_coeff * self.air_density * self.frontal_area

    def tires(self, axle: str) -> tuple[TireCoeffs, TireCoeffs]:
        """(longitudinal, lateral) coefficients for one wheel of ``axle``."""
        if axle not in self._cache:
            fz = self.static_load(axle)
            lon = TireCoeffs(self.lon_B, self.lon_C, self.lon_mu * fz, self.lon_E)
            lat = TireCoeffs(self.lat_B, self.lat_C, self.lat_mu * fz, self.lat_E)
            self._cache[axle] = (lon, lat)
        return self._cache[axle]

    @property
    def tire_front(self):
        return self.tires("front")

    @property
    def tire_rear(self):
        return self.tires("rear")

    def replace(self, **changes) -> "VehicleParams":
        return replace(self, **changes)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.init]


def magic_formula(x, c: TireCoeffs, cos_variant: bool = False):
    """Pacejka magic formula ``D sin(C atan(Bx - E(Bx - atan(Bx))))``.

    Works on scalars and arrays. ``cos_variant`` swaps the outer sine for a
    cosine.
    """
    bx = c.B * np.asarray(x, dtype=float)
    arg = c.C * np.arctan(bx - c.E * (bx - np.arctan(bx)))
    out = c.D * (np.cos(arg) if cos_variant else np.sin(arg))
    return out if out.ndim else float(out)


def _mf(x: float, c: TireCoeffs, cos_variant: bool) -> float:
    # scalar fast path used inside the integrator
    bx = c.B * x
    arg = c.C * math.atan(bx - c.E * (bx - math.atan(bx)))
    return c.D * (math.cos(arg) if cos_variant else math.sin(arg))


def slip_quantities(s, u, p: VehicleParams) -> np.ndarray:
    """Per-wheel (alpha, kappa), shape (4, 2), wheel order FL, FR, RL, RR.

    Raises
    ------
    LowSpeedError
        If ``|vx| < MIN_VX``.
    """
    vx, vy, r = s
    kf, kr, df, dr = u
    if not abs(vx) >= MIN_VX:
        raise LowSpeedError(f"tire model undefined at vx={vx!r}")
    a_f = df - math.atan((vy + p.l_v * r) / vx)
    a_r = dr - math.atan((vy - p.l_h * r) / vx)
    return np.array([[a_f, kf], [a_f, kf], [a_r, kr], [a_r, kr]])


def wheel_to_body(f, delta: float) -> np.ndarray:
    """Rotate a wheel-frame force pair (F_Rx, F_Ry) into the body frame."""
    fx, fy = f
    c, s = math.cos(delta), math.sin(delta)
    return np.array([c * fx - s * fy, s * fx + c * fy])


@dataclass
class WheelForces:
    wheel: np.ndarray  # (4, 2) wheel frame
    body: np.ndarray  # (4, 2) body frame
    delta: np.ndarray  # (4,)


def wheel_forces(s, u, p: VehicleParams) -> WheelForces:
    slips = slip_quantities(s, u, p)
    deltas = np.array([u[2], u[2], u[3], u[3]], dtype=float)
    wheel = np.empty((4, 2))
    body = np.empty((4, 2))
    for i, axle in enumerate(("front", "front", "rear", "rear")):
        lon, lat = p.tires(axle)
        wheel[i] = (_mf(slips[i, 1], lon, p.cos_formula), _mf(slips[i, 0], lat, p.cos_formula))
        body[i] = wheel_to_body(wheel[i], deltas[i])
    return WheelForces(wheel, body, deltas)


def _derivs(vx, vy, r, kf, kr, df, dr, p: VehicleParams):
    # Scalar kernel. Left and right wheels coincide, so each axle force is
    # twice the single-wheel force.
    if not abs(vx) >= MIN_VX:
        raise LowSpeedError(f"tire model undefined at vx={vx!r}")
    cos_v = p.cos_formula
    lon_f, lat_f = p.tires("front")
    lon_r, lat_r = p.tires("rear")

    a_f = df - math.atan((vy + p.l_v * r) / vx)
    a_r = dr - math.atan((vy - p.l_h * r) / vx)
    fxf, fyf = _mf(kf, lon_f, cos_v), _mf(a_f, lat_f, cos_v)
    fxr, fyr = _mf(kr, lon_r, cos_v), _mf(a_r, lat_r, cos_v)

    cf, sf = math.cos(df), math.sin(df)
    cr, sr = math.cos(dr), math.sin(dr)
    bxf, byf = cf * fxf - sf * fyf, sf * fxf + cf * fyf
    bxr, byr = cr * fxr - sr * fyr, sr * fxr + cr * fyr

    drag = p.drag_factor * math.hypot(vx, vy)
    m = p.mass
    dvx = (2.0 * (bxf + bxr) - drag * vx) / m + r * vy
    dvy = (2.0 * (byf + byr) - drag * vy) / m - r * vx
    dr_ = 2.0 * (p.l_v * byf - p.l_h * byr) / p.yaw_inertia
    return dvx, dvy, dr_


def derivatives(s, u, p: VehicleParams) -> np.ndarray:
    """Continuous-time state derivative (dvx, dvy, dyaw_rate)."""
    return np.array(_derivs(*map(float, s), *map(float, u), p))


def yaw_moment(s, u, p: VehicleParams) -> float:
    """Total yaw moment of the tire forces about the centre of gravity."""
    wf = wheel_forces(s, u, p)
    x_pos = np.array([p.l_v, p.l_v, -p.l_h, -p.l_h])
    return float(np.sum(x_pos * wf.body[:, 1]))


def step(s, u, p: VehicleParams, Ts: float) -> np.ndarray:
    """Advance the state by one RK4 step of length ``Ts`` with ``u`` held."""
    if not Ts > 0:
        raise ValueError("Ts must be positive")
    vx, vy, r = map(float, s)
    uu = tuple(map(float, u))
    k1 = _derivs(vx, vy, r, *uu, p)
    h = 0.5 * Ts
    k2 = _derivs(vx + h * k1[0], vy + h * k1[1], r + h * k1[2], *uu, p)
    k3 = _derivs(vx + h * k2[0], vy + h * k2[1], r + h * k2[2], *uu, p)
    k4 = _derivs(vx + Ts * k3[0], vy + Ts * k3[1], r + Ts * k3[2], *uu, p)
    w = Ts / 6.0
    return np.array([
        vx + w * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
        vy + w * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
        r + w * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]),
    ])


def simulate(x0, inputs, p: VehicleParams, Ts: float) -> np.ndarray:
    """Roll ``x0`` forward through a sequence of inputs; returns (K+1, 3)."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    out = np.empty((len(inputs) + 1, NX))
    out[0] = x0
    for k, u in enumerate(inputs):
        out[k + 1] = step(out[k], u, p, Ts)
    return out


def linearize(s_bar, u_bar, p: VehicleParams, Ts: float, eps: float = 1e-5):
    """Affine model ``x+ ~= A x + B u + c`` of :func:`step` around a trim point.

    Central finite differences with step ``eps`` in every coordinate; ``c``
    is chosen so the model is exact at ``(s_bar, u_bar)``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    s_bar = np.asarray(s_bar, dtype=float)
    u_bar = np.asarray(u_bar, dtype=float)
    A = np.empty((NX, NX))
    B = np.empty((NX, NU))
    for j in range(NX):
        d = np.zeros(NX)
        d[j] = eps
        A[:, j] = (step(s_bar + d, u_bar, p, Ts) - step(s_bar - d, u_bar, p, Ts)) / (2 * eps)
    for j in range(NU):
        d = np.zeros(NU)
        d[j] = eps
        B[:, j] = (step(s_bar, u_bar + d, p, Ts) - step(s_bar, u_bar - d, p, Ts)) / (2 * eps)
    c = step(s_bar, u_bar, p, Ts) - A @ s_bar - B @ u_bar
    return A, B, c


def kinetic_energy(x, p: VehicleParams):
    """Kinetic energy of one state or an (n, 3) array of states."""
    x = np.asarray(x, dtype=float)
    return 0.5 * p.mass * (x[..., 0] ** 2 + x[..., 1] ** 2) + 0.5 * p.yaw_inertia * x[..., 2] ** 2
