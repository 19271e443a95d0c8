import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from koopgov import governor as gv
from koopgov import koopman as km
from koopgov.errors import ConfigError, Infeasible, ModelMissing
from koopgov.governor import RHO, HalfPlane, SafeSet
from koopgov.normalization import NormalizationSpec
from koopgov.plant import VehicleParams

NORM = NormalizationSpec((5, -1, -0.6, -3000, -0.15), (25, 1, 0.6, 1000, 0.15))
S = SafeSet.default()
BOUNDS = (-3000.0, 1000.0)


def random_model(seed, torque_gain=0.05):
    m = km.init_model(seed=seed, norm=NORM)
    rng = np.random.default_rng(seed)
    m.A = 0.05 * rng.normal(size=m.A.shape)
    m.A[:3, :3] += np.eye(3)
    # recentre so the normalized state stays near mid-range
    m.A[:3, 14] = 0.5 * (1 - m.A[:3, :3].sum(axis=1))
    m.B = 0.02 * rng.normal(size=m.B.shape)
    m.B[:3, 0] = torque_gain * rng.normal(size=3)
    return m


class Frozen:
    """Predictor that returns the current state whatever the torque."""

    def affine(self, x, u_bar, bounds=None):
        return np.asarray(x, dtype=float), np.zeros(3)


def test_h_values_examples():
    h = gv.h_values([15.0, 0.0, 0.0], S)
    # sideslip planes carry b = 0.55, yaw-rate planes b = 0.4
    assert h.tolist() == [0.55, 0.55, 0.4, 0.4]
    assert gv.h_values([15.0, -0.5, 0.1], S)[0] == pytest.approx(0.0, abs=1e-15)
    X = np.array([[10.0, 0.1, 0.2], [12.0, -0.3, 0.05]])
    assert np.allclose(gv.h_values(X, S), [gv.h_values(x, S) for x in X], rtol=0, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 1))
def test_h_is_affine(vy1, r1, vy2, r2, lam):
    a, b = np.array([10.0, vy1, r1]), np.array([10.0, vy2, r2])
    mix = gv.h_values(lam * a + (1 - lam) * b, S)
    assert np.allclose(mix, lam * gv.h_values(a, S) + (1 - lam) * gv.h_values(b, S), rtol=0, atol=1e-12)


def test_safe_set_validation():
    with pytest.raises(ConfigError):
        HalfPlane(0.0, 0.0, 1.0)
    band = (HalfPlane(1.3, 1.0, 0.55), HalfPlane(-1.3, -1.0, 0.55))
    with pytest.raises(ConfigError, match="unbounded"):
        SafeSet(band, (0.2, 0.2))
    empty = band + (HalfPlane(0, 1, -2.0), HalfPlane(0, -1, 0.4))
    with pytest.raises(ConfigError, match="empty"):
        SafeSet(empty, (0.2,) * 4)
    with pytest.raises(ConfigError):
        SafeSet(S.planes, (0.2, 0.2, 0.2, 1.5))
    assert SafeSet.from_dict(S.to_dict()) == S
    with pytest.raises(ConfigError):
        SafeSet.from_dict({"planes": [[1, 0, 1]], "colour": 1})


def test_constraints_identity_prediction_with_full_alpha():
    s1 = SafeSet(S.planes, (1.0,) * 4)
    x = np.array([12.0, 0.1, -0.2])
    p, q = gv.build_constraints(x, (0.0, 0.02), Frozen(), s1, BOUNDS)
    assert np.all(p == 0.0)
    assert np.allclose(q, gv.h_values(x, S), rtol=0, atol=1e-15)


def test_zero_torque_column_gives_zero_p():
    m = random_model(1)
    m.B[1:3, 0] = 0.0
    p, _ = gv.build_constraints(np.array([12.0, 0.1, 0.1]), (100.0, 0.03), m, S, BOUNDS)
    assert np.all(p == 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_constraints_match_direct_evaluation(seed):
    rng = np.random.default_rng(seed)
    m = random_model(seed)
    alphas = tuple(rng.uniform(0, 1, size=4))
    s = SafeSet(S.planes, alphas)
    x = np.array([rng.uniform(8, 20), rng.uniform(-0.4, 0.4), rng.uniform(-0.3, 0.3)])
    steer = rng.uniform(-0.1, 0.1)
    p, q = gv.build_constraints(x, (0.0, steer), m, s, BOUNDS)
    h_now = gv.h_values(x, s)
    for T in (-1000.0, 0.0, 1000.0):
        un = NORM.normalize_input([T, steer])
        xn_next = km.project(km.step_lifted(m, km.lift(m, NORM.normalize_state(x)), un))
        direct = gv.h_values(NORM.denormalize_state(xn_next), s) - (1 - np.array(alphas)) * h_now
        assert np.allclose(p * T + q, direct, rtol=0, atol=1e-9)


def test_model_missing():
    with pytest.raises(ModelMissing):
        gv.build_constraints(np.array([10.0, 0, 0]), (0.0, 0.0), None, S, BOUNDS)
    m = random_model(0)
    m.norm = None
    with pytest.raises(ModelMissing):
        gv.solve_governor(np.array([10.0, 0, 0]), (0.0, 0.0), m, S, BOUNDS)


def test_solver_passes_nominal_through_bit_exactly():
    t_bar = 123.456789
    sol = gv.solve_qp([1.0, -2.0, 0.0, 0.0], [500.0, 900.0, 0.1, 0.3], t_bar, *BOUNDS)
    assert sol.hard_feasible and sol.torque == t_bar and sol.objective == 0.0


def test_single_violated_constraint_projection():
    # p1 T + q1 >= 0 with p1 = 2e-4, q1 = -0.1  ->  T >= 500
    p, q = [2e-4, 0, 0, 0], [-0.1, 1, 1, 1]
    sol = gv.solve_qp(p, q, 100.0, *BOUNDS)
    assert sol.torque == pytest.approx(max(100.0, 0.1 / 2e-4))
    assert gv.grid_solve(p, q, 100.0, *BOUNDS).torque == pytest.approx(500.0, abs=0.02)
    # T >= 5000 lies beyond T_max: soft optimum of (T-100)^2 + rho p^2 (T-5000)^2
    sol = gv.solve_qp([2e-4, 0, 0, 0], [-1.0, 1, 1, 1], 100.0, *BOUNDS)
    w = 1e6 * 4e-8
    assert not sol.hard_feasible
    assert sol.torque == pytest.approx((100.0 + w * 5000.0) / (1 + w), rel=1e-12)
    assert sol.slack[0] == pytest.approx(1.0 - 2e-4 * sol.torque, rel=1e-12)
    # a stiff constraint pins the soft optimum at the bound
    sol = gv.solve_qp([2e-2, 0, 0, 0], [-100.0, 1, 1, 1], 100.0, *BOUNDS)
    assert sol.torque == 1000.0


def test_soft_solution_balances_conflict():
    # T >= 10 and T <= -10 cannot both hold; rho makes the split symmetric
    p, q = np.array([1.0, -1.0]), np.array([-10.0, -10.0])
    sol = gv.solve_qp(p, q, 3.0, -100.0, 100.0)
    assert not sol.hard_feasible
    assert sol.torque == pytest.approx(0.0, abs=1e-5)
    assert np.all(sol.slack >= 0)


def test_nan_raises_infeasible():
    with pytest.raises(Infeasible):
        gv.solve_qp([float("nan")], [0.0], 0.0, *BOUNDS)
    with pytest.raises(ConfigError):
        gv.solve_qp([1.0], [0.0], 0.0, 1.0, 1.0)


coef = st.floats(-2e-3, 2e-3).map(lambda v: 0.0 if abs(v) < 1e-7 else v)
offs = st.floats(-2.0, 2.0)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(coef, offs), min_size=4, max_size=4), st.floats(-3000, 1000))
def test_analytic_matches_grid_oracle(pq, t_bar):
    p, q = np.array(pq).T
    # a grid can only resolve feasibility gaps and objectives coarser than its step
    lo = max([BOUNDS[0]] + [-b / a for a, b in zip(p, q) if a > 0])
    hi = min([BOUNDS[1]] + [-b / a for a, b in zip(p, q) if a < 0])
    assume(abs(lo - hi) > 0.02 and all(a != 0 or b >= 0 or b < -1e-6 for a, b in zip(p, q)))
    a = gv.solve_qp(p, q, t_bar, *BOUNDS)
    assume(a.hard_feasible or a.objective > 1e3 * (1 + RHO * (p * p).sum()) * 0.005 ** 2)
    g = gv.grid_solve(p, q, t_bar, *BOUNDS)
    assert a.hard_feasible == g.hard_feasible
    assert abs(a.torque - g.torque) <= 0.02
    assert BOUNDS[0] <= a.torque <= BOUNDS[1]
    if not a.hard_feasible:
        assert a.objective <= g.objective * (1 + 1e-12) + 1e-12
        assert a.objective == pytest.approx(g.objective, rel=1e-4)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(coef, offs), min_size=4, max_size=4), st.floats(-3000, 1000))
def test_minimal_perturbation_property(pq, t_bar):
    p, q = np.array(pq).T
    sol = gv.solve_qp(p, q, t_bar, *BOUNDS)
    if sol.hard_feasible:
        lo, hi = sol.interval
        if lo <= t_bar <= hi:
            assert sol.torque == t_bar
        else:
            assert sol.torque in (lo, hi)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-5, 1e-2), st.lists(st.floats(-5, 5), min_size=2, max_size=10), st.floats(-3000, 1000))
def test_monotone_safety_pressure(p1, q1s, t_bar):
    # Compared within one regime: once -q1/p1 passes T_max the soft penalty
    # rho p1^2 can be weak, so the relaxed optimum may sit below T_max.
    sols = [gv.solve_qp([p1, 0, 0, 0], [q1, 1, 1, 1], t_bar, *BOUNDS) for q1 in sorted(q1s, reverse=True)]
    for hard in (True, False):
        torques = [s.torque for s in sols if s.hard_feasible == hard]
        assert all(b >= a for a, b in zip(torques, torques[1:]))


class ModelPlant:
    """A lifted linear model used as the true plant, so prediction is exact."""

    def __init__(self, model):
        self.pred = gv.KoopmanPredictor(model)

    def step(self, x, T, steer):
        c0, c1 = self.pred.affine(x, (T, steer))
        return c0 + c1 * T


@pytest.mark.parametrize("seed", range(10))
def test_forward_invariance_with_exact_predictor(seed):
    rng = np.random.default_rng(seed)
    m = random_model(seed, torque_gain=0.3)
    s = SafeSet(S.planes, tuple(rng.uniform(0.05, 1.0, size=4)))
    truth = ModelPlant(m)
    x = np.array([15.0, 0.0, 0.0])
    steps = 0
    for k in range(200):
        t_bar, steer = rng.uniform(*BOUNDS), rng.uniform(-0.15, 0.15)
        res = gv.solve_governor(x, (t_bar, steer), truth.pred, s, BOUNDS)
        if res.feasible_interval is None:
            break
        x = truth.step(x, res.torque_applied, steer)
        steps += 1
        assert gv.h_values(x, s).min() >= -1e-9
    assert steps > 0


def test_governed_run_inside_safe_set_is_pass_through():
    p = VehicleParams()
    drv = gv.DoubleTurnDriver(target_speed=15.0, turns=((1.0, 2.0, 0.005),))
    for variant, model in (("MF-SCG", None), ("DK-SCG", random_model(0, torque_gain=0.0))):
        run = gv.closed_loop_run(p, drv, variant, S, model=model, x0=(14.0, 0, 0), duration=4.0)
        assert run.min_h(S) > 0.3
        assert all(r.torque_applied == r.torque_nominal for r in run.log)


def test_no_scg_and_unknown_variant():
    p = VehicleParams()
    drv = gv.DoubleTurnDriver()
    run = gv.closed_loop_run(p, drv, "NO-SCG", S, duration=1.0)
    assert len(run.t) == 21 and run.states.shape == (21, 3)
    assert all(r.torque_applied == r.torque_nominal for r in run.log)
    with pytest.raises(ConfigError):
        gv.closed_loop_run(p, drv, "XX", S, duration=1.0)
    with pytest.raises(ModelMissing):
        gv.closed_loop_run(p, drv, "DK-SCG", S, duration=1.0)


def test_log_csv_schema():
    run = gv.closed_loop_run(VehicleParams(), gv.DoubleTurnDriver(), "MF-SCG", S, duration=0.5)
    lines = gv.governor_log_csv(run, comment="config_hash=x").splitlines()
    assert lines[0] == "# config_hash=x"
    assert lines[1].split(",") == list(gv.LOG_COLUMNS)
    assert len(lines) == 2 + len(run.log)
    assert gv.phase_portrait_csv(run).splitlines()[0].split(",") == list(gv.PHASE_COLUMNS)


def test_driver_steer_profile():
    d = gv.DoubleTurnDriver(turns=((1.0, 2.0, 0.1),), ramp=0.5)
    assert d.steer(0.5) == 0.0 and d.steer(2.0) == 0.1
    assert d.steer(1.25) == pytest.approx(0.05)
    assert d(0.0, (20.0, 0, 0))[0] == 0.0
    assert d(0.0, (10.0, 0, 0))[0] == 1000.0


def test_solve_timing_is_recorded():
    res = gv.solve_governor(np.array([12.0, 0.1, 0.0]), (0.0, 0.02), random_model(0), S, BOUNDS)
    assert 0 <= res.solve_time < 1.0 and math.isfinite(res.solve_time)
    assert np.all(res.slack_used >= 0)
