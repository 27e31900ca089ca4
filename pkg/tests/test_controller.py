import numpy as np
import pytest

from ccsmppi.controller import CcsMppiConfig, ControllerState, Scenario, ccsmppi_step, run_episode
from ccsmppi.costs import Obstacle, RunningCost
from ccsmppi.dynamics import make_double_integrator
from ccsmppi.mppi import MppiParams

MPPI = MppiParams(T=8, K=30, lam=0.1, nu=0.1, eps_cov=0.001 * np.eye(2))


def _scenario(W, T_max=10):
    model = make_double_integrator(0.05, T_max, W)
    obs = (Obstacle((0.5, 1.0), 0.3),)
    return Scenario(model, RunningCost("obstacle-goal", 10.0, (1.0, 3.0), obs), np.zeros(4), T_max, obs)


def _config(T_max=10, sigma_max=1.0):
    return CcsMppiConfig(T_max, 4, MPPI, sigma_max=sigma_max)


def test_first_step_covariance_is_process_noise():
    W = np.diag([0, 0, 0.0125, 0.0125])
    sc, cfg = _scenario(W), _config()
    st = ControllerState.initial(sc.x0, MPPI.T, 2)
    u, nxt, tel = ccsmppi_step(st, sc.x0, sc, cfg, np.random.default_rng(0))
    np.testing.assert_allclose(tel.Sigma_next, W, atol=1e-15)
    np.testing.assert_allclose(nxt.Sigma, W, atol=1e-15)
    # measurement equals nominal, so only the feedforward part acts
    np.testing.assert_array_equal(u, tel.u_bar)
    assert not tel.reset and tel.status == "optimal"


def test_covariance_propagates_through_closed_loop_gain():
    W = np.diag([1e-4, 1e-4, 0.0125, 0.0125])
    sc, cfg = _scenario(W), _config()
    rng = np.random.default_rng(1)
    F = rng.standard_normal((4, 4))
    Sigma = 1e-3 * F @ F.T
    st = ControllerState(np.zeros(4), Sigma, np.zeros((MPPI.T, 2)))
    x_real = np.array([0.01, -0.02, 0.05, 0.0])
    u, nxt, tel = ccsmppi_step(st, x_real, sc, cfg, np.random.default_rng(0))
    A, B = sc.model.A_seq[0], sc.model.B_seq[0]
    AL = A + B @ tel.L
    np.testing.assert_allclose(nxt.Sigma, AL @ Sigma @ AL.T + W, atol=1e-14)
    np.testing.assert_allclose(u, tel.u_bar + tel.L @ x_real)
    np.testing.assert_allclose(nxt.x_bar, A @ np.zeros(4) + B @ tel.u_bar)


@pytest.mark.parametrize("sigma_max,expect_reset", [(3.5, True), (4.5, False)])
def test_reset_threshold(sigma_max, expect_reset):
    W = np.diag([1.0, 2.0, 3.0, 4.0])
    sc, cfg = _scenario(W), _config(sigma_max=sigma_max)
    st = ControllerState.initial(sc.x0, MPPI.T, 2)
    x_real = sc.x0
    _, nxt, tel = ccsmppi_step(st, x_real, sc, cfg, np.random.default_rng(0))
    assert tel.lam_max == pytest.approx(4.0)
    assert tel.reset is expect_reset
    assert nxt.resync is expect_reset
    if expect_reset:
        assert not nxt.Sigma.any()
        # the following step plans from the fresh measurement
        measured = np.array([0.3, 0.1, 0.0, 0.2])
        _, _, tel2 = ccsmppi_step(nxt, measured, sc, cfg, np.random.default_rng(1))
        np.testing.assert_array_equal(tel2.x_bar, measured)
    else:
        np.testing.assert_allclose(nxt.Sigma, W)


def test_noise_free_plant_follows_nominal():
    sc, cfg = _scenario(np.zeros((4, 4))), _config()
    rec = run_episode(cfg, sc, 3)
    np.testing.assert_allclose(rec.states, rec.nominal, atol=1e-12)
    assert not rec.covariance.any()


def test_episode_is_deterministic():
    sc, cfg = _scenario(np.diag([0, 0, 0.0125, 0.0125])), _config()
    a = run_episode(cfg, sc, 11)
    b = run_episode(cfg, sc, 11)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    c = run_episode(cfg, sc, 12)
    assert not np.array_equal(a.states, c.states)


def test_record_shapes():
    sc, cfg = _scenario(np.diag([0, 0, 0.0125, 0.0125])), _config()
    rec = run_episode(cfg, sc, 0)
    assert rec.T == 10
    assert rec.states.shape == (11, 4) and rec.nominal.shape == (11, 4)
    assert rec.inputs.shape == (10, 2) and rec.gains.shape == (10, 2, 4)
    assert rec.covariance.shape == (11, 4, 4)
    assert len(rec.status) == 10
    np.testing.assert_allclose(rec.speeds, np.linalg.norm(rec.states[:, 2:], axis=1))


def test_config_validation():
    with pytest.raises(ValueError):
        CcsMppiConfig(10, 9, MPPI)
    with pytest.raises(ValueError):
        CcsMppiConfig(10, 4, MPPI, sigma_max=0.0)
    with pytest.raises(ValueError):
        CcsMppiConfig(10, 4, MPPI, p_fail=0.7)
    st = ControllerState(np.zeros(4), np.zeros((4, 4)), np.zeros((8, 2)), k=10)
    with pytest.raises(ValueError):
        ccsmppi_step(st, np.zeros(4), _scenario(np.zeros((4, 4))), _config(), np.random.default_rng(0))
