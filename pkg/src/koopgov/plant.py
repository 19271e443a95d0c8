"""Planar four-wheel vehicle model used as ground truth.

Wheel order is FL, FR, RL, RR (1..4). Wheels 2 and 4 sit on the right side,
so their longitudinal forces produce positive (counter-clockwise) yaw.
Lateral tire forces follow a simplified magic formula; longitudinal forces
are quasi-static (torque over wheel radius) and clipped to the friction
circle left over by the lateral force.

The hot path works on plain floats with the ``math`` module; a single
derivative evaluation is called tens of millions of times during corpus
generation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, NonFinite

V_EPS = 0.5
INTERNAL_DT = 0.005
CONTROL_DT = 0.05


class VehicleState(NamedTuple):
    v_x: float
    v_y: float
    omega_r: float


class ControlInput(NamedTuple):
    torque_total: float
    steer_front: float


class TireForces(NamedTuple):
    fx: np.ndarray
    fy: np.ndarray
    fz: np.ndarray
    slip_angle: np.ndarray


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 1500.0
    yaw_inertia: float = 2500.0
    dist_front: float = 1.2
    dist_rear: float = 1.4
    track_width: float = 1.6
    wheel_radius: float = 0.32
    friction: float = 0.85
    rolling_coeff: float = 0.01
    gravity: float = 9.81
    tire_B: float = 10.0
    tire_C: float = 1.9
    tire_E: float = 0.97
    drive_efficiency: float = 1.0
    torque_min: float = -3000.0
    torque_max: float = 1000.0

    def __post_init__(self):
        for name in ("mass", "yaw_inertia", "dist_front", "dist_rear",
                     "track_width", "wheel_radius", "gravity"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 < self.friction <= 1:
            raise ConfigError(f"friction must be in (0, 1], got {self.friction}")
        if self.rolling_coeff < 0:
            raise ConfigError("rolling_coeff must be >= 0")
        if not self.torque_min < self.torque_max:
            raise ConfigError("torque_min must be < torque_max")
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise ConfigError(f"{f.name} is not finite")

    def with_(self, **changes) -> "VehicleParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VehicleParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown vehicle parameter(s): {sorted(unknown)}")
        return cls(**d)


def vertical_loads(params: VehicleParams) -> np.ndarray:
    """Static per-wheel loads [FL, FR, RL, RR] in N."""
    w = params.mass * params.gravity
    L = params.dist_front + params.dist_rear
    front = w * params.dist_rear / (2.0 * L)
    rear = (w - 2.0 * front) / 2.0
    return np.array([front, front, rear, rear])


def _loads(p: VehicleParams):
    w = p.mass * p.gravity
    front = w * p.dist_rear / (2.0 * (p.dist_front + p.dist_rear))
    return front, (w - 2.0 * front) / 2.0


def _slip(num, den, steer):
    if abs(den) < V_EPS:
        return 0.0
    return steer - math.atan(num / den)


def slip_angles(state, steer_front: float, params: VehicleParams) -> np.ndarray:
    vx, vy, r = state
    half = 0.5 * params.track_width * r
    nf = vy + params.dist_front * r
    nr = vy - params.dist_rear * r
    return np.array([
        _slip(nf, vx - half, steer_front),
        _slip(nf, vx + half, steer_front),
        _slip(nr, vx - half, 0.0),
        _slip(nr, vx + half, 0.0),
    ])


def _mf(alpha, fz, mu, B, C, E):
    ba = B * alpha
    return mu * fz * math.sin(C * math.atan(ba - E * (ba - math.atan(ba))))


def lateral_force(alpha: float, fz: float, mu: float,
                  B: float = 10.0, C: float = 1.9, E: float = 0.97) -> float:
    """Magic-formula lateral force with peak D = mu * fz."""
    return _mf(alpha, fz, mu, B, C, E)


def _fx(torque_wheel, vx, fz, mu, r_w, c_rr, fy):
    fx = torque_wheel / r_w
    if vx > 0.0:
        fx -= c_rr * fz
    elif vx < 0.0:
        fx += c_rr * fz
    cap2 = (mu * fz) ** 2 - fy * fy
    cap = math.sqrt(cap2) if cap2 > 0.0 else 0.0
    if fx > cap:
        return cap
    if fx < -cap:
        return -cap
    return fx


def longitudinal_force(torque_wheel: float, v_x: float, fz: float, mu: float,
                       params: VehicleParams, fy: float = 0.0) -> float:
    """Quasi-static drive force, clipped to what the friction circle leaves after ``fy``."""
    return _fx(torque_wheel, v_x, fz, mu, params.wheel_radius, params.rolling_coeff, fy)


def _forces(vx, vy, r, torque, steer, p: VehicleParams):
    fzf, fzr = _loads(p)
    mu = p.friction
    B, C, E = p.tire_B, p.tire_C, p.tire_E
    half = 0.5 * p.track_width * r
    nf = vy + p.dist_front * r
    nr = vy - p.dist_rear * r
    a1 = _slip(nf, vx - half, steer)
    a2 = _slip(nf, vx + half, steer)
    a3 = _slip(nr, vx - half, 0.0)
    a4 = _slip(nr, vx + half, 0.0)
    fy1 = _mf(a1, fzf, mu, B, C, E)
    fy2 = _mf(a2, fzf, mu, B, C, E)
    fy3 = _mf(a3, fzr, mu, B, C, E)
    fy4 = _mf(a4, fzr, mu, B, C, E)
    tw = 0.25 * torque
    rw, crr = p.wheel_radius, p.rolling_coeff
    fx1 = _fx(tw, vx, fzf, mu, rw, crr, fy1)
    fx2 = _fx(tw, vx, fzf, mu, rw, crr, fy2)
    fx3 = _fx(tw, vx, fzr, mu, rw, crr, fy3)
    fx4 = _fx(tw, vx, fzr, mu, rw, crr, fy4)
    return (fx1, fx2, fx3, fx4), (fy1, fy2, fy3, fy4), (fzf, fzf, fzr, fzr), (a1, a2, a3, a4)


def tire_forces(state, inp, params: VehicleParams) -> TireForces:
    fx, fy, fz, al = _forces(state[0], state[1], state[2], inp[0], inp[1], params)
    return TireForces(np.array(fx), np.array(fy), np.array(fz), np.array(al))


def _derivs(vx, vy, r, torque, steer, p: VehicleParams):
    (fx1, fx2, fx3, fx4), (fy1, fy2, fy3, fy4), _, _ = _forces(vx, vy, r, torque, steer, p)
    c, s = math.cos(steer), math.sin(steer)
    m, iz = p.mass, p.yaw_inertia
    k = 0.5 * p.track_width / iz
    dvx = ((fx1 + fx2) * c - (fy1 + fy2) * s + fx3 + fx4) / m + vy * r
    dvy = ((fx1 + fx2) * s + (fy1 + fy2) * c + fy3 + fy4) / m - vx * r
    dr = (p.drive_efficiency * k * ((fx2 * c - fy2 * s) + fx4)
          + k * (-(fx1 * c - fy1 * s) - fx3)
          + (fx2 * s + fy2 * c + fx1 * s + fy1 * c) * p.dist_front / iz
          - (fy3 + fy4) * p.dist_rear / iz)
    return dvx, dvy, dr


def derivatives(state, inp, params: VehicleParams) -> VehicleState:
    """Rates (dV_x, dV_y, d omega_r) of the planar Newton-Euler model."""
    return VehicleState(*_derivs(state[0], state[1], state[2], inp[0], inp[1], params))


def _rk4(vx, vy, r, T, d, h, p):
    k1 = _derivs(vx, vy, r, T, d, p)
    k2 = _derivs(vx + 0.5 * h * k1[0], vy + 0.5 * h * k1[1], r + 0.5 * h * k1[2], T, d, p)
    k3 = _derivs(vx + 0.5 * h * k2[0], vy + 0.5 * h * k2[1], r + 0.5 * h * k2[2], T, d, p)
    k4 = _derivs(vx + h * k3[0], vy + h * k3[1], r + h * k3[2], T, d, p)
    h6 = h / 6.0
    return (vx + h6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
            vy + h6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
            r + h6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]))


def rk4_step(state, inp, params: VehicleParams, h: float) -> VehicleState:
    """One classical RK4 step of size ``h`` without sub-stepping or clamping."""
    return VehicleState(*_rk4(state[0], state[1], state[2], inp[0], inp[1], h, params))


def step(state, inp, params: VehicleParams, dt: float = CONTROL_DT,
         substep: float = INTERNAL_DT) -> VehicleState:
    """Advance the plant by ``dt`` with the input held constant.

    Integrates with RK4 at a step no larger than ``substep`` and clamps
    V_x at zero after every sub-step.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    n = max(1, math.ceil(dt / substep - 1e-9))
    h = dt / n
    vx, vy, r = float(state[0]), float(state[1]), float(state[2])
    T, d = float(inp[0]), float(inp[1])
    for _ in range(n):
        vx, vy, r = _rk4(vx, vy, r, T, d, h, params)
        if vx < 0.0:
            vx = 0.0
    if not (math.isfinite(vx) and math.isfinite(vy) and math.isfinite(r)):
        raise NonFinite(f"non-finite plant state {(vx, vy, r)} from {tuple(state)} with input {tuple(inp)}")
    return VehicleState(vx, vy, r)
