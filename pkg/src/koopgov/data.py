"""Scenario simulation, corpus I/O, normalization fitting, windowing and splits.

Two excitation kinds stand in for a human driver:

* ``sweep`` (straight roads): piecewise-constant torque steps that aim at a
  random speed over a 1-3 s hold, plus a steering chirp whose amplitude is
  scaled to a random fraction of the friction-limited lateral acceleration.
* ``curve``: a proportional heading follower on an arc of radius R (left
  turns, separated by short straights), with a speed-hold torque loop and
  random torque offsets.
"""
from __future__ import annotations

import csv
import io
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plant
from .errors import DegenerateChannel, NonFinite, TooFewTrajectories
from .normalization import CHANNELS, NormalizationSpec
from .plant import CONTROL_DT, VehicleParams

CSV_COLUMNS = ("scenario_id", "seed", "t", "v_x", "v_y", "omega_r", "torque", "steer", "mu", "radius")
MAX_STEER = 0.15
TABLE2_RADII = (50.0, 75.0, 100.0)
TABLE2_MUS = (0.85, 0.7, 0.5, 0.2)
# Observed ranges of the reference collection (steering channel is not checked).
TABLE3_RANGES = {
    "torque": (-2919.0, 847.0),
    "v_x": (8.41, 19.91),
    "v_y": (-0.50, 0.29),
    "omega_r": (-0.38, 0.37),
}


@dataclass(frozen=True)
class ExcitationSpec:
    kind: str = "sweep"
    initial_speed: float = 14.0
    seed: int = 0
    speed_range: tuple = (8.0, 20.0)
    hold_range: tuple = (1.0, 3.0)
    sweep_freq: tuple = (0.1, 0.5)
    max_steer_amp: float = 0.12
    accel_budget: tuple = (0.3, 0.95)
    torque_noise: float = 300.0
    target_speed: float | None = None
    arc_range: tuple = (3.0, 8.0)
    straight_range: tuple = (2.0, 4.0)
    heading_gain: float = 0.5
    yaw_gain: float = 0.15

    def __post_init__(self):
        if self.kind not in ("sweep", "curve"):
            raise ValueError(f"unknown excitation kind {self.kind!r}")
        if not 0 < self.max_steer_amp <= MAX_STEER:
            raise ValueError(f"steer amplitude must be in (0, {MAX_STEER}]")
        if self.initial_speed < 0:
            raise ValueError("initial_speed must be >= 0")


@dataclass(frozen=True)
class ScenarioSpec:
    scenario_id: str
    segment: str = "straight"
    mu: float = 0.85
    radius: float | None = None
    duration: float = 60.0
    excitation: ExcitationSpec = field(default_factory=ExcitationSpec)

    def __post_init__(self):
        if self.segment not in ("straight", "curve"):
            raise ValueError(f"segment must be 'straight' or 'curve', got {self.segment!r}")
        if self.segment == "curve" and not (self.radius and self.radius > 0):
            raise ValueError("curve segments need a positive radius")
        if not 0 < self.mu <= 1:
            raise ValueError(f"mu must be in (0, 1], got {self.mu}")
        if self.duration <= 0:
            raise ValueError("duration must be > 0")


@dataclass
class Trajectory:
    t: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    scenario_id: str = ""
    seed: int = 0
    mu: float = 0.85
    radius: float | None = None
    dt: float = CONTROL_DT

    def __len__(self):
        return len(self.t)

    @property
    def samples(self) -> np.ndarray:
        """``(N, 5)`` array ordered like ``CHANNELS``."""
        return np.hstack([self.states, self.inputs])


def _stable_seed(*parts) -> int:
    return zlib.crc32("|".join(str(p) for p in parts).encode())


class SweepDriver:
    def __init__(self, spec: ScenarioSpec, params: VehicleParams, rng):
        self.ex, self.spec, self.p, self.rng = spec.excitation, spec, params, rng
        self.next_hold = 0.0
        self.torque = 0.0
        self.budget = 1.0
        f0, f1 = self.ex.sweep_freq
        if rng.random() < 0.5:
            f0, f1 = f1, f0
        self.f0, self.f1 = f0, f1
        self.phase0 = rng.uniform(0, 2 * math.pi)

    def __call__(self, t, x):
        ex, p = self.ex, self.p
        if t >= self.next_hold - 1e-9:
            hold = self.rng.uniform(*ex.hold_range)
            v_tgt = self.rng.uniform(*ex.speed_range)
            T = p.mass * p.wheel_radius * (v_tgt - x[0]) / hold + self.rng.normal(0.0, ex.torque_noise)
            self.torque = min(max(T, p.torque_min), p.torque_max)
            self.budget = self.rng.uniform(*ex.accel_budget)
            self.next_hold = t + hold
        # linear chirp between f0 and f1 over the scenario
        dur = self.spec.duration
        phase = self.phase0 + 2 * math.pi * (self.f0 * t + 0.5 * (self.f1 - self.f0) * t * t / dur)
        L = p.dist_front + p.dist_rear
        v = max(x[0], 1.0)
        amp = min(ex.max_steer_amp, self.budget * self.spec.mu * p.gravity * L / (v * v))
        return self.torque, amp * math.sin(phase)


class CurveDriver:
    def __init__(self, spec: ScenarioSpec, params: VehicleParams, rng):
        self.ex, self.spec, self.p, self.rng = spec.excitation, spec, params, rng
        self.psi = self.psi_ref = 0.0
        # the first toggle puts the car on a straight so it can reach arc speed
        self.on_arc = True
        self.next_seg = 0.0
        self.next_hold = 0.0
        self.offset = 0.0
        self.v_tgt = spec.excitation.target_speed or spec.excitation.initial_speed

    def __call__(self, t, x):
        ex, p, rng = self.ex, self.p, self.rng
        fixed = ex.target_speed is not None
        if t >= self.next_seg - 1e-9:
            if fixed:
                self.on_arc, self.next_seg = True, math.inf
            else:
                self.on_arc = not self.on_arc
                self.next_seg = t + rng.uniform(*(ex.arc_range if self.on_arc else ex.straight_range))
                if not self.on_arc:
                    # speed for the coming arc is chosen on the straight before it
                    v_cap = math.sqrt(rng.uniform(*ex.accel_budget) * self.spec.mu * p.gravity * self.spec.radius)
                    hi = max(ex.speed_range[0], min(ex.speed_range[1], v_cap))
                    self.v_tgt = rng.uniform(ex.speed_range[0], hi)
        if not fixed and t >= self.next_hold - 1e-9:
            self.offset = rng.normal(0.0, ex.torque_noise)
            self.next_hold = t + rng.uniform(*ex.hold_range)
        kappa = 1.0 / self.spec.radius if self.on_arc else 0.0
        L = p.dist_front + p.dist_rear
        err = max(-0.3, min(0.3, self.psi_ref - self.psi))
        steer = L * kappa + ex.heading_gain * err + ex.yaw_gain * (x[0] * kappa - x[2])
        steer = max(-MAX_STEER, min(MAX_STEER, steer))
        T = 0.8 * p.mass * p.wheel_radius * (self.v_tgt - x[0]) + (0.0 if fixed else self.offset)
        T = min(max(T, p.torque_min), p.torque_max)
        # heading integrators advance over the coming interval
        self.psi += CONTROL_DT * x[2]
        self.psi_ref += CONTROL_DT * x[0] * kappa
        return T, steer


def simulate(controller, x0, params: VehicleParams, n_samples: int, dt: float = CONTROL_DT,
             label: str = ""):
    """Closed-loop simulation: ``u_k = controller(t_k, x_k)``, ``x_{k+1} = plant(x_k, u_k)``."""
    xs = np.empty((n_samples, 3))
    us = np.empty((n_samples, 2))
    x = plant.VehicleState(*map(float, x0))
    for k in range(n_samples):
        t = k * dt
        T, d = controller(t, x)
        xs[k] = x
        us[k] = (T, d)
        if k + 1 < n_samples:
            try:
                x = plant.step(x, (T, d), params, dt)
            except NonFinite as exc:
                raise NonFinite(f"scenario {label or '?'} at t={t:.2f}s: {exc}") from exc
    return np.arange(n_samples) * dt, xs, us


def run_scenario(spec: ScenarioSpec, params: VehicleParams | None = None) -> Trajectory:
    params = (params or VehicleParams()).with_(friction=spec.mu)
    ex = spec.excitation
    rng = np.random.default_rng(_stable_seed(spec.scenario_id, ex.seed))
    driver = (SweepDriver if ex.kind == "sweep" else CurveDriver)(spec, params, rng)
    n = int(round(spec.duration / CONTROL_DT))
    t, xs, us = simulate(driver, (ex.initial_speed, 0.0, 0.0), params, n, label=spec.scenario_id)
    return Trajectory(t, xs, us, spec.scenario_id, ex.seed, spec.mu,
                      spec.radius if spec.segment == "curve" else None)


def default_scenarios(seeds=(0, 1, 2), duration=60.0, mus=TABLE2_MUS, radii=TABLE2_RADII):
    """Every (segment x friction) pair, one spec per seed, in canonical order."""
    out = []
    segs = [("straight", None)] + [("curve", r) for r in radii]
    for seg, r in segs:
        for mu in mus:
            sid = f"straight_mu{mu:g}" if seg == "straight" else f"R{r:g}_mu{mu:g}"
            for s in seeds:
                rng = np.random.default_rng(_stable_seed("init", sid, s))
                v0 = float(rng.uniform(10.0, 18.0))
                if r is not None:
                    v0 = min(v0, max(8.0, math.sqrt(0.9 * mu * 9.81 * r)))
                ex = ExcitationSpec(kind="sweep" if seg == "straight" else "curve",
                                    initial_speed=v0, seed=int(s))
                out.append(ScenarioSpec(sid, seg, mu, r, duration, ex))
    return sorted(out, key=lambda s: (s.scenario_id, s.excitation.seed))


def fit_normalization(trajectories) -> NormalizationSpec:
    if not trajectories:
        raise ValueError("no trajectories to fit normalization on")
    data = np.vstack([tr.samples for tr in trajectories])
    lo, hi = data.min(axis=0), data.max(axis=0)
    for name, a, b in zip(CHANNELS, lo, hi):
        if not b > a:
            raise DegenerateChannel(f"channel {name} is constant ({a}); cannot min-max normalize")
    return NormalizationSpec(tuple(map(float, lo)), tuple(map(float, hi)))


@dataclass
class WindowSet:
    X: np.ndarray
    U: np.ndarray
    source: np.ndarray

    def __len__(self):
        return len(self.X)

    def normalized(self, norm: NormalizationSpec) -> "WindowSet":
        return WindowSet(norm.normalize_state(self.X), norm.normalize_input(self.U), self.source)


def window(trajectories, K: int) -> WindowSet:
    """All stride-1 windows of K+1 samples; never spans two trajectories."""
    xs, us, src = [], [], []
    for i, tr in enumerate(trajectories):
        n = len(tr) - K
        if n <= 0:
            continue
        idx = np.arange(n)[:, None] + np.arange(K + 1)[None, :]
        xs.append(tr.states[idx])
        us.append(tr.inputs[idx])
        src.append(np.full(n, i))
    if not xs:
        return WindowSet(np.empty((0, K + 1, 3)), np.empty((0, K + 1, 2)), np.empty(0, dtype=int))
    return WindowSet(np.concatenate(xs), np.concatenate(us), np.concatenate(src))


def split(trajectories, ratios=(0.8, 0.1, 0.1), seed=0):
    """Partition whole trajectories into (train, val, test)."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(trajectories)
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise TooFewTrajectories(f"{n} trajectories at ratios {ratios} leave an empty split "
                                 f"({n_train}/{n_val}/{n_test})")
    order = np.random.default_rng(seed).permutation(n)
    pick = lambda ix: [trajectories[i] for i in sorted(ix)]
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


def coverage_report(trajectories, ranges=TABLE3_RANGES, frac=0.8) -> dict:
    """Check that each channel reaches the central ``frac`` of the reference span."""
    data = np.vstack([tr.samples for tr in trajectories])
    out = {}
    for name, (lo, hi) in ranges.items():
        col = data[:, CHANNELS.index(name)]
        margin = 0.5 * (1 - frac) * (hi - lo)
        need_lo, need_hi = lo + margin, hi - margin
        out[name] = {
            "min": float(col.min()), "max": float(col.max()),
            "need_min_below": need_lo, "need_max_above": need_hi,
            "ok": bool(col.min() <= need_lo and col.max() >= need_hi),
        }
    return out


def _fmt(v) -> str:
    return f"{v:.9g}"


def trajectory_to_csv(tr: Trajectory, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        for line in comment.splitlines():
            buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    radius = "" if tr.radius is None else _fmt(tr.radius)
    for t, x, u in zip(tr.t, tr.states, tr.inputs):
        w.writerow([tr.scenario_id, tr.seed, _fmt(t), *map(_fmt, x), *map(_fmt, u), _fmt(tr.mu), radius])
    return buf.getvalue()


def write_trajectory(tr: Trajectory, path, comment: str | None = None) -> None:
    Path(path).write_text(trajectory_to_csv(tr, comment))


def read_trajectory(path) -> Trajectory:
    lines = [l for l in Path(path).read_text().splitlines() if l and not l.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ValueError(f"{path}: missing or unexpected CSV header")
    body = rows[1:]
    if not body:
        raise ValueError(f"{path}: no samples")
    num = np.array([[float(v) for v in r[2:9]] for r in body])
    radius = body[0][9]
    dt = float(num[1, 0] - num[0, 0]) if len(num) > 1 else CONTROL_DT
    return Trajectory(num[:, 0], num[:, 1:4], num[:, 4:6], body[0][0], int(body[0][1]),
                      float(num[0, 6]), float(radius) if radius else None, round(dt, 9))


def trajectory_filename(tr: Trajectory) -> str:
    return f"{tr.scenario_id}_seed{tr.seed}.csv"


def read_corpus(directory) -> list[Trajectory]:
    """Every trajectory CSV in ``directory``, in canonical (scenario, seed) order."""
    trs = [read_trajectory(p) for p in sorted(Path(directory).glob("*.csv"))]
    if not trs:
        raise FileNotFoundError(f"no trajectory CSVs in {directory}")
    return sorted(trs, key=lambda tr: (tr.scenario_id, tr.seed))
