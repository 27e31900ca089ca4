"""Receding-horizon CCSMPPI supervisor and the closed-loop episode runner.

Each step: MPPI plans from the nominal state, half-spaces are generated
around the plan, covariance steering corrects the plan into a feedback
policy, and only its first feedforward input and initial-deviation gain are
applied. The nominal state and its covariance are propagated alongside the
real plant and collapsed onto the real state when the covariance grows past
``sigma_max``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import streams
from .ccs import CcsProblem, first_step, solve_ccs
from .costs import Obstacle, RunningCost
from .dynamics import GaussianBelief, LiftedSystem, LtvModel, build_lifted, sample_noise, step
from .halfspace import Track, hsgen
from .mppi import MppiParams, mppi_step, shift_warm_start

logger = logging.getLogger(__name__)


@dataclass
class Scenario:
    """Everything the closed loop needs besides controller parameters.

    ``model.W_seq`` is the noise covariance the controller designs for;
    ``W_real`` is what the simulated plant actually draws (defaults to the
    model's).
    """

    model: LtvModel
    cost: RunningCost
    x0: np.ndarray
    T_max: int
    obstacles: tuple[Obstacle, ...] = ()
    track: Track | None = None
    W_real: np.ndarray | None = None
    _lifted: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.obstacles = tuple(self.obstacles)
        if self.W_real is None:
            self.W_real = self.model.W_seq[0]
        self.W_real = np.asarray(self.W_real, dtype=float)

    def plant_noise(self, k: int) -> np.ndarray:
        return self.W_real if self.W_real.ndim == 2 else self.W_real[k]

    def lifted(self, k: int, N: int) -> tuple[LiftedSystem, tuple[np.ndarray, ...]]:
        """Lifted window of ``N`` stages starting at ``k`` and its noise covariances."""
        key = (0 if self.model.time_invariant else k, N)
        hit = self._lifted.get(key)
        if hit is None:
            window = self.model.window(k, N)
            hit = (build_lifted(window), window.W_seq)
            self._lifted[key] = hit
        return hit


@dataclass(frozen=True)
class CcsMppiConfig:
    T_max: int = 200
    T_cs: int = 20
    mppi: MppiParams = field(default_factory=MppiParams)
    Q: np.ndarray = field(default_factory=lambda: np.diag([10.0, 10.0, 1.0, 1.0]))
    R: np.ndarray = field(default_factory=lambda: np.eye(2))
    p_fail: float = 0.01
    sigma_max: float = 1.0
    backend: str = "clarabel"

    def __post_init__(self):
        if self.T_cs > self.mppi.T:
            raise ValueError(f"T_cs={self.T_cs} must not exceed the MPPI horizon {self.mppi.T}")
        if self.T_cs < 1:
            raise ValueError("T_cs must be >= 1")
        if not self.sigma_max > 0:
            raise ValueError("sigma_max must be positive")
        if not 0 < self.p_fail <= 0.5:
            raise ValueError("p_fail must lie in (0, 0.5]")


@dataclass(frozen=True)
class ControllerState:
    x_bar: np.ndarray
    Sigma: np.ndarray
    warm: np.ndarray
    k: int = 0
    # set by a covariance reset: re-anchor the nominal on the next measurement
    resync: bool = False

    @classmethod
    def initial(cls, x0, T_mppi: int, n_u: int) -> "ControllerState":
        x0 = np.asarray(x0, dtype=float)
        return cls(x0.copy(), np.zeros((x0.size, x0.size)), np.zeros((T_mppi, n_u)), 0)


@dataclass(frozen=True)
class StepTelemetry:
    k: int
    x_bar: np.ndarray
    u_bar: np.ndarray
    L: np.ndarray
    Sigma_next: np.ndarray
    lam_max: float
    reset: bool
    status: str
    max_slack: float
    min_margin: float
    plan_states: np.ndarray | None = None


def ccsmppi_step(state: ControllerState, x_real, scenario: Scenario, config: CcsMppiConfig,
                 rng: np.random.Generator) -> tuple[np.ndarray, ControllerState, StepTelemetry]:
    if state.k >= config.T_max:
        raise ValueError(f"stage {state.k} beyond T_max={config.T_max}")
    x_real = np.asarray(x_real, dtype=float)
    k = state.k
    x_bar = x_real.copy() if state.resync else state.x_bar
    Sigma = state.Sigma

    model = scenario.model
    plan = mppi_step(model.window(k, config.mppi.T), x_bar, state.warm, scenario.cost, config.mppi, rng)
    halfspaces = hsgen(plan, scenario.obstacles, scenario.track, config.T_cs)
    lifted, W_seq = scenario.lifted(k, config.T_cs)
    problem = CcsProblem(lifted, GaussianBelief(x_bar, Sigma), plan, config.Q, config.R,
                         halfspaces, config.p_fail, W_seq)
    sol = solve_ccs(problem, config.backend)
    u_bar, L = first_step(sol)
    u = u_bar + L @ (x_real - x_bar)

    A, B = model.A_seq[min(k, model.N - 1)], model.B_seq[min(k, model.N - 1)]
    W = model.W_seq[min(k, model.N - 1)]
    x_bar_next = A @ x_bar + B @ u_bar
    AL = A + B @ L
    Sigma_next = AL @ Sigma @ AL.T + W
    Sigma_next = 0.5 * (Sigma_next + Sigma_next.T)
    lam = float(np.linalg.eigvalsh(Sigma_next)[-1])
    reset = lam > config.sigma_max
    telemetry = StepTelemetry(k, x_bar, u_bar, L, Sigma_next, lam, reset, sol.status, sol.max_slack,
                              float(sol.margins.min(initial=np.inf)), plan.states)
    if reset:
        x_bar_next = x_real.copy()
        Sigma_next = np.zeros_like(Sigma_next)
    nxt = ControllerState(x_bar_next, Sigma_next, shift_warm_start(plan.controls), k + 1, reset)
    return u, nxt, telemetry


@dataclass
class EpisodeRecord:
    """Per-stage log of one closed-loop run (``T`` steps, ``T+1`` states)."""

    controller: str
    seed: int
    states: np.ndarray
    inputs: np.ndarray
    nominal: np.ndarray
    lam_max: np.ndarray
    status: list
    max_slack: np.ndarray
    min_margin: np.ndarray
    cost: np.ndarray  # unscaled running cost at each state
    reset: np.ndarray
    covariance: np.ndarray  # nominal covariance at each stage, after any reset
    gains: np.ndarray  # feedback gain applied at each step

    @property
    def T(self) -> int:
        return len(self.inputs)

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    @property
    def speeds(self) -> np.ndarray:
        return np.linalg.norm(self.states[:, 2:4], axis=1)


class CcsMppiController:
    name = "ccsmppi"

    def __init__(self, scenario: Scenario, config: CcsMppiConfig):
        self.scenario = scenario
        self.config = config
        self.state = ControllerState.initial(scenario.x0, config.mppi.T, scenario.model.n_u)

    def act(self, x_real, rng):
        u, self.state, tel = ccsmppi_step(self.state, x_real, self.scenario, self.config, rng)
        return u, tel

    def nominal_after(self, x_real) -> np.ndarray:
        """Nominal state the next step would plan from, given the measurement."""
        return np.asarray(x_real, dtype=float).copy() if self.state.resync else self.state.x_bar


def run_episode(config: CcsMppiConfig, scenario: Scenario, seed: int, controller: str = "ccsmppi",
                **controller_options) -> EpisodeRecord:
    """Simulate ``T_max`` steps of the true plant under the chosen controller.

    ``controller`` is ``"ccsmppi"``, ``"tube"`` or ``"mppi"``. Plant noise and
    MPPI sampling use stage-indexed streams derived from ``seed``, so the run
    is reproducible and two controllers with the same seed see the same
    disturbances.
    """
    if controller == "ccsmppi":
        ctrl = CcsMppiController(scenario, config)
    else:
        from .baselines import make_baseline

        ctrl = make_baseline(controller, scenario, config, **controller_options)

    T = config.T_max
    n_x, n_u = scenario.model.n_x, scenario.model.n_u
    states = np.empty((T + 1, n_x))
    nominal = np.empty((T + 1, n_x))
    inputs = np.empty((T, n_u))
    lam = np.zeros(T + 1)
    slack = np.zeros(T)
    margin = np.full(T, np.nan)
    reset = np.zeros(T, dtype=bool)
    cov = np.zeros((T + 1, n_x, n_x))
    gains = np.zeros((T, n_u, n_x))
    status = []
    states[0] = scenario.x0
    for k in range(T):
        u, tel = ctrl.act(states[k], streams.stream(seed, streams.MPPI_SAMPLING, k))
        nominal[k] = tel.x_bar
        inputs[k] = u
        lam[k + 1] = tel.lam_max
        slack[k] = tel.max_slack
        margin[k] = tel.min_margin
        reset[k] = tel.reset
        gains[k] = tel.L
        Sigma = getattr(getattr(ctrl, "state", None), "Sigma", None)
        if Sigma is not None:
            cov[k + 1] = Sigma
        status.append(tel.status)
        w = sample_noise(scenario.plant_noise(k), streams.stream(seed, streams.PLANT_NOISE, k))
        states[k + 1] = step(scenario.model, min(k, scenario.model.N - 1), states[k], u, w)
    nominal[T] = ctrl.nominal_after(states[T])
    cost = np.asarray(scenario.cost.base(states), dtype=float)
    return EpisodeRecord(ctrl.name, seed, states, inputs, nominal, lam, status, slack, margin, cost, reset,
                         cov, gains)
