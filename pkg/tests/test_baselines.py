import numpy as np
import pytest
from scipy.linalg import block_diag

from ccsmppi.baselines import TubeState, lqr_gains, standard_mppi_step, tube_mppi_step
from ccsmppi.controller import CcsMppiConfig, Scenario, run_episode
from ccsmppi.costs import Obstacle, RunningCost
from ccsmppi.dynamics import LtvModel, build_lifted, make_double_integrator
from ccsmppi.mppi import MppiParams


def _random_ltv(rng, N, n_x=3, n_u=2):
    A = rng.standard_normal((N, n_x, n_x)) / np.sqrt(n_x)
    B = rng.standard_normal((N, n_x, n_u))
    return LtvModel.from_arrays(A, B, np.zeros((N, n_x, n_x)))


def test_lqr_single_stage_example():
    m = LtvModel.from_arrays(np.eye(2)[None], np.eye(2)[None], np.zeros((1, 2, 2)))
    np.testing.assert_allclose(lqr_gains(m, np.eye(2), np.eye(2), 1), [-0.5 * np.eye(2)])


def test_lqr_zero_state_weight_gives_zero_gain():
    m = make_double_integrator(0.05, 5)
    np.testing.assert_array_equal(lqr_gains(m, np.zeros((4, 4)), np.eye(2), 5), np.zeros((5, 2, 4)))


def test_lqr_scale_invariant():
    rng = np.random.default_rng(0)
    m = _random_ltv(rng, 6)
    Q, R = np.diag([1.0, 2.0, 3.0]), np.diag([0.5, 1.5])
    np.testing.assert_allclose(lqr_gains(m, 7.3 * Q, 7.3 * R, 6), lqr_gains(m, Q, R, 6), rtol=1e-10, atol=1e-12)


def test_lqr_matches_batch_least_squares():
    """Every stage's gain equals the first row of the batch solution of the remaining horizon."""
    rng = np.random.default_rng(1)
    for _ in range(5):
        H = int(rng.integers(1, 8))
        m = _random_ltv(rng, H)
        F = rng.standard_normal((3, 3))
        Q, R, Qf = F @ F.T, np.diag(rng.uniform(0.5, 2, 2)), 2 * np.eye(3)
        K = lqr_gains(m, Q, R, H, Qf)
        for t in range(H):
            tail = m.window(t, H - t)
            L = build_lifted(tail)
            Qb = block_diag(*([Q] * (H - t) + [Qf]))
            Rb = block_diag(*([R] * (H - t)))
            batch = -np.linalg.solve(L.G_u.T @ Qb @ L.G_u + Rb, L.G_u.T @ Qb @ L.Gamma)
            np.testing.assert_allclose(K[t], batch[:2], rtol=1e-8, atol=1e-8 * max(1, np.abs(batch).max()))


def test_lqr_errors():
    m = LtvModel.from_arrays(np.eye(2)[None], np.zeros((1, 2, 1)), np.zeros((1, 2, 2)))
    with pytest.raises(np.linalg.LinAlgError):
        lqr_gains(m, np.eye(2), np.zeros((1, 1)), 1)
    big = LtvModel.from_arrays(np.array([[[1e200]]]), np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        lqr_gains(big, np.eye(1), np.eye(1), 3)


def _scenario(W_scale=1.0, T_max=12):
    model = make_double_integrator(0.05, T_max, np.diag([0, 0, 5.0, 5.0]) * 0.0025 * W_scale)
    obs = (Obstacle((0.5, 1.0), 0.3),)
    cost = RunningCost("obstacle-goal", 10.0, (1.0, 3.0), obs)
    return Scenario(model, cost, np.zeros(4), T_max, obs)


def _config(T_max=12):
    return CcsMppiConfig(T_max, 4, MppiParams(T=8, K=30, lam=0.1, nu=0.1, eps_cov=0.001 * np.eye(2)))


def test_tube_at_nominal_applies_plan():
    sc, cfg = _scenario(), _config()
    state = TubeState(np.array([0.1, 0.2, 0.3, -0.1]), np.zeros((8, 2)))
    u, nxt, plan = tube_mppi_step(state, state.x_bar, sc, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(u, plan.controls[0])
    A, B = sc.model.A_seq[0], sc.model.B_seq[0]
    np.testing.assert_allclose(nxt.x_bar, A @ state.x_bar + B @ plan.controls[0])


def test_tube_feedback_uses_lqr_gain():
    sc, cfg = _scenario(), _config()
    state = TubeState(np.zeros(4), np.zeros((8, 2)))
    dev = np.array([0.05, -0.02, 0.1, 0.0])
    u, nxt, plan = tube_mppi_step(state, dev, sc, cfg, np.random.default_rng(0))
    K0 = lqr_gains(sc.model.window(0, 8), cfg.Q, cfg.R, 8)[0]
    np.testing.assert_allclose(u, plan.controls[0] + K0 @ dev)


def test_standard_mppi_plans_from_measurement():
    sc, cfg = _scenario(), _config()
    x = np.array([0.2, 0.1, 0.0, 0.5])
    u, warm, plan = standard_mppi_step(x, np.zeros((8, 2)), sc, cfg, np.random.default_rng(3))
    np.testing.assert_array_equal(plan.states[0], x)
    np.testing.assert_array_equal(u, plan.controls[0])
    np.testing.assert_array_equal(warm[:-1], plan.controls[1:])


def test_noise_free_tube_equals_mppi():
    sc, cfg = _scenario(W_scale=0.0), _config()
    a = run_episode(cfg, sc, 5, "mppi")
    b = run_episode(cfg, sc, 5, "tube")
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.inputs, b.inputs)


def test_tube_nominal_replays_from_record():
    sc, cfg = _scenario(), _config()
    rec = run_episode(cfg, sc, 2, "tube")
    A, B = sc.model.A_seq[0], sc.model.B_seq[0]
    for k in range(rec.T):
        u_nom = rec.inputs[k] - rec.gains[k] @ (rec.states[k] - rec.nominal[k])
        np.testing.assert_allclose(rec.nominal[k + 1], A @ rec.nominal[k] + B @ u_nom, atol=1e-12)


def test_mppi_record_nominal_is_measurement():
    sc, cfg = _scenario(), _config()
    rec = run_episode(cfg, sc, 1, "mppi")
    np.testing.assert_array_equal(rec.nominal, rec.states)
    assert set(rec.status) == {"none"}


def test_unknown_baseline():
    with pytest.raises(ValueError):
        run_episode(_config(), _scenario(), 0, "nope")
