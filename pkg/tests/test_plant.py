import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from koopgov import plant
from koopgov.errors import ConfigError, NonFinite
from koopgov.plant import VehicleParams, VehicleState

P = VehicleParams()
P0 = VehicleParams(rolling_coeff=0.0)

speeds = st.floats(3.0, 30.0)
lat = st.floats(-2.0, 2.0)
yaw = st.floats(-1.0, 1.0)
steer = st.floats(-0.15, 0.15)
torque = st.floats(-3000.0, 1000.0)
mus = st.floats(0.1, 1.0)


def test_vertical_loads_sum_and_values():
    fz = plant.vertical_loads(P)
    assert fz.sum() == pytest.approx(P.mass * P.gravity, rel=0, abs=1e-9)
    # m g l_r / (2 (l_f + l_r)) by hand: 1500 * 9.81 * 1.4 / 5.2
    assert fz[0] == pytest.approx(3961.7, abs=0.1)
    assert fz[0] == fz[1] and fz[2] == fz[3]


def test_slip_angles_straight_line():
    a = plant.slip_angles((15.0, 0.0, 0.0), 0.05, P)
    assert np.allclose(a, [0.05, 0.05, 0.0, 0.0])


def test_slip_angle_front_hand_value():
    # ignoring the track correction the front slip is -atan((0.2 + 1.2 * 0.1) / 20)
    p = P.with_(track_width=1e-9)
    a = plant.slip_angles((20.0, 0.2, 0.1), 0.0, p)
    assert a[0] == pytest.approx(-math.atan(0.32 / 20), abs=1e-9)
    assert a[0] == pytest.approx(-0.016, abs=5e-4)


def test_slip_angles_low_speed_guard():
    assert np.all(plant.slip_angles((0.1, 0.3, 0.05), 0.1, P) == 0.0)


def test_lateral_force_zero_and_linear_region():
    assert plant.lateral_force(0.0, 3961.7, 0.85) == 0.0
    d = 0.85 * 3961.7
    assert plant.lateral_force(0.001, 3961.7, 0.85) == pytest.approx(10 * 1.9 * d * 0.001, rel=0.02)
    assert 10 * 1.9 * d * 0.001 == pytest.approx(63.98, abs=0.01)


@given(st.floats(-1.5, 1.5), st.floats(500, 8000), mus)
def test_lateral_force_odd_and_bounded(alpha, fz, mu):
    f = plant.lateral_force(alpha, fz, mu)
    assert plant.lateral_force(-alpha, fz, mu) == -f
    assert abs(f) <= mu * fz * (1 + 1e-12)


def test_longitudinal_force_cases():
    assert plant.longitudinal_force(50.0, 10.0, 3961.7, 0.85, P0) == pytest.approx(156.25)
    assert plant.longitudinal_force(0.0, 10.0, 3961.7, 0.85, P0) == 0.0
    assert plant.longitudinal_force(5000.0, 10.0, 3961.7, 0.85, P0) == pytest.approx(0.85 * 3961.7)
    # rolling resistance opposes motion
    assert plant.longitudinal_force(0.0, 10.0, 4000.0, 0.85, P) == pytest.approx(-40.0)
    # lateral demand shrinks what is left for traction
    fy = 0.8 * 0.85 * 4000.0
    cap = math.sqrt((0.85 * 4000.0) ** 2 - fy ** 2)
    assert plant.longitudinal_force(5000.0, 10.0, 4000.0, 0.85, P0, fy) == pytest.approx(cap)


def test_derivatives_equilibrium_and_straight_acceleration():
    assert plant.derivatives((15.0, 0.0, 0.0), (0.0, 0.0), P0) == (0.0, 0.0, 0.0)
    d = plant.derivatives((15.0, 0.0, 0.0), (200.0, 0.0), P0)
    assert d.v_x == pytest.approx(200 / (0.32 * 1500), abs=1e-12)
    assert d.v_y == 0.0 and d.omega_r == 0.0


def test_left_steer_gives_positive_yaw_acceleration():
    assert plant.derivatives((15.0, 0.0, 0.0), (0.0, 0.05), P).omega_r > 0


def test_step_equilibrium_and_straight_line():
    x = VehicleState(15.0, 0.0, 0.0)
    assert plant.step(x, (0.0, 0.0), P0) == x
    y = plant.step(x, (200.0, 0.0), P0, 0.05)
    assert y.v_x - 15.0 == pytest.approx(0.020833, abs=1e-6)


def test_step_clamps_vx_and_rejects_bad_dt():
    y = plant.step((0.2, 0.0, 0.0), (-3000.0, 0.0), P, 0.5)
    assert y.v_x == 0.0
    with pytest.raises(ValueError):
        plant.step((10.0, 0.0, 0.0), (0.0, 0.0), P, 0.0)


def test_step_nonfinite_raises():
    with pytest.raises(NonFinite):
        plant.step((10.0, float("nan"), 0.0), (0.0, 0.0), P)


def test_params_validation():
    with pytest.raises(ConfigError):
        VehicleParams(friction=0.0)
    with pytest.raises(ConfigError):
        VehicleParams(mass=-1.0)
    with pytest.raises(ConfigError):
        VehicleParams.from_dict({"mass": 1500.0, "colour": "red"})
    assert VehicleParams.from_dict(P.to_dict()) == P


@settings(max_examples=200, deadline=None)
@given(speeds, lat, yaw, steer, torque, mus)
def test_friction_circle(vx, vy, r, d, T, mu):
    p = P.with_(friction=mu)
    f = plant.tire_forces((vx, vy, r), (T, d), p)
    assert np.all(f.fz > 0)
    assert np.all(f.fx ** 2 + f.fy ** 2 <= (mu * f.fz) ** 2 * (1 + 1e-9))


@settings(max_examples=200, deadline=None)
@given(speeds, lat, yaw, steer, torque, mus)
def test_lateral_mirror_symmetry(vx, vy, r, d, T, mu):
    p = P.with_(friction=mu)
    a = plant.derivatives((vx, vy, r), (T, d), p)
    b = plant.derivatives((vx, -vy, -r), (T, -d), p)
    assert b.v_x == pytest.approx(a.v_x, rel=1e-12, abs=1e-9)
    assert b.v_y == pytest.approx(-a.v_y, rel=1e-12, abs=1e-9)
    assert b.omega_r == pytest.approx(-a.omega_r, rel=1e-12, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(5.0, 30.0), st.floats(-0.5, 0.5), st.floats(-0.4, 0.4), steer, torque, mus)
def test_rk4_refinement_agreement(vx, vy, r, d, T, mu):
    p = P.with_(friction=mu)
    coarse = plant.step((vx, vy, r), (T, d), p, 0.05)
    fine = plant.step((vx, vy, r), (T, d), p, 0.05, substep=0.0005)
    assert np.max(np.abs(np.subtract(coarse, fine))) <= 1e-4


def test_rk4_convergence_order():
    # a smooth operating point away from the friction-circle clip
    x, u = (15.0, 0.3, 0.2), (100.0, 0.05)
    ref = plant.step(x, u, P, 0.05, substep=0.05 / 512)
    hs = np.array([0.05, 0.025, 0.0125, 0.00625])
    errs = [np.max(np.abs(np.subtract(plant.rk4_step(x, u, P, 0.05), ref)))]
    for h in hs[1:]:
        errs.append(np.max(np.abs(np.subtract(plant.step(x, u, P, 0.05, substep=h), ref))))
    order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert order >= 3.5
