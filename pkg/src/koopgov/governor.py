"""CBF safe set and the minimal-perturbation torque governor.

The safe set is an intersection of half-planes ``h_j(x) = c_y V_y + c_r w_r + b >= 0``.
At each step the governor asks that the one-step prediction keep
``h_j(x_next) >= (1 - a_j) h_j(x_k)`` with steering held at the driver's
value. Because the prediction is affine in the torque (exactly for the
Koopman model, by a secant for the physics model), every condition becomes
``p_j T + q_j >= 0`` in Nm and the QP has a single decision variable.

The 1-D QP is solved in closed form: intersect the half-lines with the torque
bounds and clamp the nominal torque into the result. If that interval is
empty, a soft version with quadratic slack penalty ``rho`` is minimized
exactly over its breakpoints.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import koopman as km
from . import plant
from .errors import ConfigError, Infeasible, ModelMissing
from .normalization import N_STATE

RHO = 1e6
VARIANTS = ("NO-SCG", "MF-SCG", "DK-SCG")
LOG_COLUMNS = ("t", "torque_nominal", "torque_applied", "steer", "h1", "h2", "h3", "h4",
               "slack_sum", "interval_lo", "interval_hi", "solve_time_us")
PHASE_COLUMNS = ("t", "v_x", "v_y", "omega_r")


@dataclass(frozen=True)
class HalfPlane:
    c_y: float
    c_r: float
    b: float

    def __post_init__(self):
        if self.c_y == 0 and self.c_r == 0:
            raise ConfigError("half-plane needs a non-zero normal (c_y, c_r)")

    def h(self, v_y, omega_r):
        return self.c_y * v_y + self.c_r * omega_r + self.b


def _bounded_nonempty(planes) -> tuple[bool, bool]:
    normals = [np.array([p.c_y, p.c_r], dtype=float) for p in planes]
    # A 2-D polyhedron is unbounded iff some recession direction d != 0 has
    # n_j . d >= 0 for all j; extreme rays of that cone are perpendicular to a normal.
    bounded = True
    for n in normals:
        for d in (np.array([-n[1], n[0]]), np.array([n[1], -n[0]])):
            if all(float(m @ d) >= -1e-12 for m in normals):
                bounded = False
    nonempty = False
    for i in range(len(planes)):
        for j in range(i + 1, len(planes)):
            M = np.array([normals[i], normals[j]])
            if abs(np.linalg.det(M)) < 1e-12:
                continue
            v = np.linalg.solve(M, -np.array([planes[i].b, planes[j].b]))
            if all(p.h(v[0], v[1]) >= -1e-9 for p in planes):
                nonempty = True
    return bounded, nonempty


@dataclass(frozen=True)
class SafeSet:
    planes: tuple
    alphas: tuple

    def __post_init__(self):
        object.__setattr__(self, "planes", tuple(self.planes))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if len(self.planes) != len(self.alphas) or not self.planes:
            raise ConfigError("need one alpha per half-plane")
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ConfigError(f"alphas must lie in [0, 1], got {self.alphas}")
        bounded, nonempty = _bounded_nonempty(self.planes)
        if not bounded:
            raise ConfigError("safe set is unbounded in (V_y, omega_r)")
        if not nonempty:
            raise ConfigError("safe set is empty")

    @classmethod
    def default(cls, alpha: float = 0.2, sideslip=(1.3, 1.0, 0.55), yaw_limit: float = 0.4):
        """``|1.3 V_y + w_r| <= 0.55`` and ``|w_r| <= 0.4``."""
        cy, cr, b = sideslip
        planes = (HalfPlane(cy, cr, b), HalfPlane(-cy, -cr, b),
                  HalfPlane(0.0, 1.0, yaw_limit), HalfPlane(0.0, -1.0, yaw_limit))
        return cls(planes, (alpha,) * 4)

    @property
    def coeffs(self) -> np.ndarray:
        """``(J, 3)`` rows ``[c_y, c_r, b]``."""
        return np.array([[p.c_y, p.c_r, p.b] for p in self.planes])

    def to_dict(self) -> dict:
        return {"planes": [[p.c_y, p.c_r, p.b] for p in self.planes], "alphas": list(self.alphas)}

    @classmethod
    def from_dict(cls, d: dict) -> "SafeSet":
        unknown = set(d) - {"planes", "alphas"}
        if unknown:
            raise ConfigError(f"unknown safe-set key(s): {sorted(unknown)}")
        try:
            planes = tuple(HalfPlane(*map(float, row)) for row in d["planes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad safe-set planes: {exc}") from exc
        alphas = d.get("alphas", [0.2] * len(planes))
        return cls(planes, tuple(alphas))


def h_values(x, safe_set: SafeSet) -> np.ndarray:
    """``h_j`` at a state; ``x`` may be ``(3,)`` or ``(N, 3)``."""
    x = np.asarray(x, dtype=float)
    C = safe_set.coeffs
    return x[..., 1:2] * C[:, 0] + x[..., 2:3] * C[:, 1] + C[:, 2] if x.ndim > 1 \
        else C[:, 0] * x[1] + C[:, 1] * x[2] + C[:, 2]


# ---------------------------------------------------------------- predictors

class KoopmanPredictor:
    """Exact affine-in-torque one-step prediction through the lifted model."""

    def __init__(self, model: km.KoopmanModel | None):
        if model is None:
            raise ModelMissing("DK-SCG needs a trained Koopman model")
        if model.norm is None:
            raise ModelMissing("Koopman model carries no normalization")
        self.model = model
        norm = model.norm
        self._lo, self._span = norm.lo, norm.span
        self._A3 = model.A[:N_STATE]
        self._B3 = model.B[:N_STATE]

    def affine(self, x, u_bar, bounds=None):
        """``(c0, c1)`` with predicted physical state ``c0 + c1 * T``."""
        lo, span = self._lo, self._span
        xn = (np.asarray(x, dtype=float) - lo[:3]) / span[:3]
        steer_n = (u_bar[1] - lo[4]) / span[4]
        z = km.lift(self.model, xn)
        base = self._A3 @ z + self._B3[:, 1] * steer_n - self._B3[:, 0] * (lo[3] / span[3])
        c1 = span[:3] * self._B3[:, 0] / span[3]
        c0 = span[:3] * base + lo[:3]
        return c0, c1


class PhysicsPredictor:
    """Plant-based one-step prediction, linearized in torque by a secant.

    The plant is not affine in torque (friction-circle clipping), so the
    prediction is the chord through the two bound torques.
    """

    def __init__(self, params: plant.VehicleParams):
        self.params = params

    def affine(self, x, u_bar, bounds=None):
        t_lo, t_hi = bounds if bounds is not None else (self.params.torque_min, self.params.torque_max)
        y_lo = np.array(plant.step(x, (t_lo, u_bar[1]), self.params))
        y_hi = np.array(plant.step(x, (t_hi, u_bar[1]), self.params))
        c1 = (y_hi - y_lo) / (t_hi - t_lo)
        return y_lo - c1 * t_lo, c1


def make_predictor(model_or_predictor):
    if model_or_predictor is None:
        raise ModelMissing("no prediction model attached to the governor")
    if isinstance(model_or_predictor, km.KoopmanModel):
        return KoopmanPredictor(model_or_predictor)
    return model_or_predictor


def build_constraints(x_k, u_bar, model, safe_set: SafeSet, bounds=None):
    """Affine CBF conditions ``p_j T + q_j >= 0`` with ``T`` in Nm.

    ``model`` is a ``KoopmanModel`` or any object with
    ``affine(x, u_bar, bounds) -> (c0, c1)``.
    """
    pred = make_predictor(model)
    c0, c1 = pred.affine(x_k, u_bar, bounds)
    C = safe_set.coeffs
    alphas = np.array(safe_set.alphas)
    h_now = C[:, 0] * x_k[1] + C[:, 1] * x_k[2] + C[:, 2]
    p = C[:, 0] * c1[1] + C[:, 1] * c1[2]
    q = C[:, 0] * c0[1] + C[:, 1] * c0[2] + C[:, 2] - (1.0 - alphas) * h_now
    return p, q


# ------------------------------------------------------------------- solver

@dataclass
class QPSolution:
    torque: float
    hard_feasible: bool
    interval: tuple | None
    slack: np.ndarray
    objective: float


def hard_interval(p, q, t_min, t_max):
    """``{T in [t_min, t_max] : p_j T + q_j >= 0 for all j}`` as ``(lo, hi)`` or None."""
    lo, hi = float(t_min), float(t_max)
    for pj, qj in zip(p, q):
        if pj > 0.0:
            lo = max(lo, -qj / pj)
        elif pj < 0.0:
            hi = min(hi, -qj / pj)
        elif qj < 0.0:
            return None
    return (lo, hi) if lo <= hi else None


def soft_objective(T, t_bar, p, q, rho=RHO):
    viol = np.minimum(np.asarray(p) * T + np.asarray(q), 0.0)
    return (T - t_bar) ** 2 + rho * float((viol * viol).sum())


def _soft_minimize(p, q, t_bar, t_min, t_max, rho):
    # Convex piecewise quadratic; on each piece between breakpoints the active
    # (violated) set is fixed, so the piece minimum is a clamped stationary point.
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    knots = [t_min, t_max]
    for pj, qj in zip(p, q):
        if pj != 0.0:
            r = -qj / pj
            if t_min < r < t_max:
                knots.append(r)
    knots = sorted(set(knots))
    best_t, best_f = None, math.inf
    for a, b in zip(knots[:-1], knots[1:]) if len(knots) > 1 else [(knots[0], knots[0])]:
        mid = 0.5 * (a + b)
        act = (p * mid + q) < 0.0
        # d/dT: 2(T - t_bar) + 2 rho sum_act p (p T + q) = 0
        curv = 1.0 + rho * float((p[act] ** 2).sum())
        lin = t_bar - rho * float((p[act] * q[act]).sum())
        t = min(max(lin / curv, a), b)
        f = soft_objective(t, t_bar, p, q, rho)
        if f < best_f or (f == best_f and t < best_t):
            best_t, best_f = t, f
    return best_t, best_f


def solve_qp(p, q, t_bar, t_min, t_max, rho=RHO) -> QPSolution:
    """min (T - t_bar)^2 s.t. p T + q >= 0, T in bounds; soft fallback if empty."""
    if not t_min < t_max:
        raise ConfigError("torque bounds need t_min < t_max")
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q)) and math.isfinite(t_bar)):
        raise Infeasible(f"non-finite governor data: p={p}, q={q}, t_bar={t_bar}")
    iv = hard_interval(p, q, t_min, t_max)
    if iv is not None:
        lo, hi = iv
        t = t_bar if lo <= t_bar <= hi else (lo if t_bar < lo else hi)
        return QPSolution(t, True, iv, np.zeros(len(p)), (t - t_bar) ** 2)
    t, f = _soft_minimize(p, q, t_bar, float(t_min), float(t_max), rho)
    slack = np.maximum(-(p * t + q), 0.0)
    return QPSolution(t, False, None, slack, f)


def grid_solve(p, q, t_bar, t_min, t_max, rho=RHO, resolution=0.01) -> QPSolution:
    """Brute-force oracle on a uniform torque grid.

    A grid point counts as hard-feasible if it is within half a grid step of
    satisfying every constraint, so intervals narrower than the grid are not
    misclassified.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    n = int(math.floor((t_max - t_min) / resolution + 1e-9))
    T = t_min + resolution * np.arange(n + 1)
    if T[-1] < t_max:
        T = np.append(T, t_max)
    g = T[:, None] * p + q
    tol = 0.5 * resolution * np.abs(p)
    ok = np.all(g >= -tol, axis=1)
    if ok.any():
        cand = T[ok]
        i = int(np.argmin((cand - t_bar) ** 2))
        t = float(cand[i])
        return QPSolution(t, True, (float(cand.min()), float(cand.max())), np.zeros(len(p)), (t - t_bar) ** 2)
    viol = np.minimum(g, 0.0)
    f = (T - t_bar) ** 2 + rho * (viol * viol).sum(axis=1)
    i = int(np.argmin(f))
    t = float(T[i])
    return QPSolution(t, False, None, np.maximum(-(p * t + q), 0.0), float(f[i]))


@dataclass
class GovernorResult:
    torque_applied: float
    torque_nominal: float
    steer: float
    h_before: np.ndarray
    h_after_pred: np.ndarray
    feasible_interval: tuple | None
    slack_used: np.ndarray
    solve_time: float
    p: np.ndarray = field(default_factory=lambda: np.zeros(0))
    q: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def interval_contains_nominal(self) -> bool:
        iv = self.feasible_interval
        return iv is not None and iv[0] <= self.torque_nominal <= iv[1]


def solve_governor(x_k, u_bar, model, safe_set: SafeSet, bounds, rho=RHO) -> GovernorResult:
    """Build the CBF constraints for ``x_k`` and return the governed torque."""
    t_min, t_max = bounds
    x_k = np.asarray(x_k, dtype=float)
    p, q = build_constraints(x_k, u_bar, model, safe_set, bounds)
    t0 = time.perf_counter()
    sol = solve_qp(p, q, float(u_bar[0]), t_min, t_max, rho)
    dt = time.perf_counter() - t0
    h_now = h_values(x_k, safe_set)
    alphas = np.array(safe_set.alphas)
    h_after = p * sol.torque + q + (1.0 - alphas) * h_now
    return GovernorResult(sol.torque, float(u_bar[0]), float(u_bar[1]), h_now, h_after,
                          sol.interval, sol.slack, dt, p, q)


# -------------------------------------------------------------- closed loop

@dataclass
class DoubleTurnDriver:
    """Speed-hold torque plus a pre-planned steering profile.

    Each turn is ``(t_start, duration, amplitude)``: steering ramps up over
    ``ramp`` seconds, holds, and ramps back down (cosine ramps). The torque
    command is proportional to the speed error and saturated to the bounds.
    """
    target_speed: float = 20.0
    speed_gain: float = 1500.0
    turns: tuple = ((2.0, 3.0, 0.12), (7.0, 3.0, 0.12))
    ramp: float = 0.5
    torque_bounds: tuple = (-3000.0, 1000.0)

    def steer(self, t: float) -> float:
        d = 0.0
        for start, dur, amp in self.turns:
            s = t - start
            if s < 0.0 or s > dur:
                continue
            r = min(self.ramp, 0.5 * dur)
            if s < r:
                w = 0.5 - 0.5 * math.cos(math.pi * s / r)
            elif s > dur - r:
                w = 0.5 - 0.5 * math.cos(math.pi * (dur - s) / r)
            else:
                w = 1.0
            d += amp * w
        return max(-0.15, min(0.15, d))

    def __call__(self, t: float, x) -> tuple:
        T = self.speed_gain * (self.target_speed - x[0])
        T = max(self.torque_bounds[0], min(self.torque_bounds[1], T))
        return T, self.steer(t)


@dataclass
class ClosedLoopRun:
    variant: str
    t: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    log: list

    def h_series(self, safe_set: SafeSet) -> np.ndarray:
        return h_values(self.states, safe_set)

    def min_h(self, safe_set: SafeSet) -> float:
        return float(self.h_series(safe_set).min())


def closed_loop_run(params: plant.VehicleParams, driver, variant: str, safe_set: SafeSet,
                    model=None, x0=(20.0, 0.0, 0.0), duration: float = 12.0,
                    dt: float = plant.CONTROL_DT, mf_params: plant.VehicleParams | None = None,
                    rho: float = RHO) -> ClosedLoopRun:
    """Simulate driver -> (governor) -> plant at ``dt`` for ``duration`` seconds.

    ``variant`` is NO-SCG (pass-through), MF-SCG (physics predictor with
    ``mf_params``, defaulting to ``params``) or DK-SCG (``model``).
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown governor variant {variant!r}; choose from {VARIANTS}")
    bounds = (params.torque_min, params.torque_max)
    predictor = None
    if variant == "DK-SCG":
        predictor = make_predictor(model)
    elif variant == "MF-SCG":
        predictor = PhysicsPredictor(mf_params or params)
    n = int(round(duration / dt))
    x = plant.VehicleState(*map(float, x0))
    ts, xs, us, log = [], [], [], []
    for k in range(n):
        t = k * dt
        t_bar, steer = driver(t, x)
        if predictor is None:
            h = h_values(np.array(x), safe_set)
            res = GovernorResult(float(t_bar), float(t_bar), float(steer), h, np.full(len(h), np.nan),
                                 None, np.zeros(len(h)), 0.0)
        else:
            res = solve_governor(np.array(x), (t_bar, steer), predictor, safe_set, bounds, rho)
        ts.append(t)
        xs.append(tuple(x))
        us.append((res.torque_applied, steer))
        log.append(res)
        try:
            x = plant.step(x, (res.torque_applied, steer), params, dt)
        except plant.NonFinite as exc:
            raise plant.NonFinite(f"{variant} run at t={t:.2f}: {exc}") from exc
    ts.append(n * dt)
    xs.append(tuple(x))
    return ClosedLoopRun(variant, np.array(ts), np.array(xs), np.array(us), log)


def _num(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.9g}"


def governor_log_csv(run: ClosedLoopRun, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        for line in comment.splitlines():
            buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for t, res in zip(run.t, run.log):
        iv = res.feasible_interval
        h = list(res.h_before) + [float("nan")] * (4 - len(res.h_before))
        w.writerow([_num(float(t)), _num(res.torque_nominal), _num(res.torque_applied), _num(res.steer),
                    *(_num(float(v)) for v in h[:4]), _num(float(np.sum(res.slack_used))),
                    _num(None if iv is None else iv[0]), _num(None if iv is None else iv[1]),
                    _num(res.solve_time * 1e6)])
    return buf.getvalue()


def phase_portrait_csv(run: ClosedLoopRun, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        for line in comment.splitlines():
            buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PHASE_COLUMNS)
    for t, x in zip(run.t, run.states):
        w.writerow([_num(float(t)), *(_num(float(v)) for v in x)])
    return buf.getvalue()


def bounding_box(states) -> tuple:
    """``(vy_min, vy_max, wr_min, wr_max)`` of the visited (V_y, w_r) points."""
    s = np.asarray(states, dtype=float)
    return float(s[:, 1].min()), float(s[:, 1].max()), float(s[:, 2].min()), float(s[:, 2].max())
