"""Standard MPPI and tube-MPPI comparison controllers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controller import CcsMppiConfig, Scenario, StepTelemetry
from .dynamics import LtvModel
from .mppi import mppi_step, shift_warm_start


def lqr_gains(model: LtvModel, Q, R, horizon: int, Q_terminal=None) -> np.ndarray:
    """Finite-horizon discrete LQR gains ``K_t`` with ``u_t = K_t x_t``.

    Backward Riccati pass over stages ``0..horizon-1`` of ``model`` with
    terminal weight ``Q_terminal`` (defaults to ``Q``). Returns an array of
    shape ``(horizon, n_u, n_x)``.
    """
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    P = Q.copy() if Q_terminal is None else np.asarray(Q_terminal, dtype=float)
    gains = np.empty((horizon, model.n_u, model.n_x))
    for t in range(horizon - 1, -1, -1):
        A = model.A_seq[min(t, model.N - 1)]
        B = model.B_seq[min(t, model.N - 1)]
        S = R + B.T @ P @ B
        try:
            K = -np.linalg.solve(S, B.T @ P @ A)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"R + B'PB is singular at stage {t}") from exc
        P = Q + A.T @ P @ (A + B @ K)
        P = 0.5 * (P + P.T)
        if not np.all(np.isfinite(P)):
            raise FloatingPointError(f"Riccati recursion diverged at stage {t} (max |P| = {np.abs(P).max():.3e})")
        gains[t] = K
    return gains


def standard_mppi_step(x_real, warm, scenario: Scenario, config: CcsMppiConfig, rng, k: int = 0):
    """Plan from the measured state and apply the first control."""
    plan = mppi_step(scenario.model.window(k, config.mppi.T), np.asarray(x_real, dtype=float), warm,
                     scenario.cost, config.mppi, rng)
    return plan.controls[0].copy(), shift_warm_start(plan.controls), plan


@dataclass(frozen=True)
class TubeState:
    x_bar: np.ndarray
    warm: np.ndarray
    k: int = 0
    gains: np.ndarray | None = None


def tube_mppi_step(state: TubeState, x_real, scenario: Scenario, config: CcsMppiConfig, rng,
                   reset_threshold: float | None = None):
    """MPPI on the noise-free nominal state plus LQR tracking of the real state.

    The tracking weights are the steering weights ``config.Q`` / ``config.R``.
    With ``reset_threshold`` set, the nominal state snaps to the real one when
    they drift further apart than that distance.
    """
    x_real = np.asarray(x_real, dtype=float)
    x_bar = state.x_bar
    if reset_threshold is not None and np.linalg.norm(x_real - x_bar) > reset_threshold:
        x_bar = x_real.copy()
    k = state.k
    model = scenario.model
    plan = mppi_step(model.window(k, config.mppi.T), x_bar, state.warm, scenario.cost, config.mppi, rng)
    gains = lqr_gains(model.window(k, config.mppi.T), config.Q, config.R, config.mppi.T)
    u_nom = plan.controls[0]
    u = u_nom + gains[0] @ (x_real - x_bar)
    A, B = model.A_seq[min(k, model.N - 1)], model.B_seq[min(k, model.N - 1)]
    nxt = TubeState(A @ x_bar + B @ u_nom, shift_warm_start(plan.controls), k + 1, gains)
    return u, nxt, plan


def _telemetry(k, x_bar, u, L, plan) -> StepTelemetry:
    n_x = x_bar.size
    return StepTelemetry(k, x_bar, u, L, np.zeros((n_x, n_x)), 0.0, False, "none", 0.0, np.nan,
                         plan.states)


class MppiController:
    name = "mppi"

    def __init__(self, scenario: Scenario, config: CcsMppiConfig):
        self.scenario = scenario
        self.config = config
        self.warm = np.zeros((config.mppi.T, scenario.model.n_u))
        self.k = 0

    def act(self, x_real, rng):
        u, self.warm, plan = standard_mppi_step(x_real, self.warm, self.scenario, self.config, rng, self.k)
        x = np.asarray(x_real, dtype=float)
        tel = _telemetry(self.k, x, u, np.zeros((u.size, x.size)), plan)
        self.k += 1
        return u, tel

    def nominal_after(self, x_real) -> np.ndarray:
        return np.asarray(x_real, dtype=float).copy()


class TubeMppiController:
    name = "tube"

    def __init__(self, scenario: Scenario, config: CcsMppiConfig, reset_threshold: float | None = None):
        self.scenario = scenario
        self.config = config
        self.reset_threshold = reset_threshold
        self.state = TubeState(scenario.x0.copy(), np.zeros((config.mppi.T, scenario.model.n_u)))

    def act(self, x_real, rng):
        prev = self.state
        u, self.state, plan = tube_mppi_step(prev, x_real, self.scenario, self.config, rng, self.reset_threshold)
        x_bar_used = _used_nominal(prev, x_real, self.reset_threshold)
        tel = _telemetry(prev.k, x_bar_used, plan.controls[0], self.state.gains[0], plan)
        return u, tel

    def nominal_after(self, x_real) -> np.ndarray:
        return _used_nominal(self.state, x_real, self.reset_threshold)


def _used_nominal(state: TubeState, x_real, threshold):
    x_real = np.asarray(x_real, dtype=float)
    if threshold is not None and np.linalg.norm(x_real - state.x_bar) > threshold:
        return x_real.copy()
    return state.x_bar


def make_baseline(kind: str, scenario: Scenario, config: CcsMppiConfig, **options):
    if kind == "mppi":
        return MppiController(scenario, config)
    if kind == "tube":
        return TubeMppiController(scenario, config, **options)
    raise ValueError(f"unknown controller {kind!r}; expected 'ccsmppi', 'tube' or 'mppi'")
