"""Information-theoretic MPPI on a linear model.

Rollouts are noise-free; exploration comes only from the sampled control
perturbations ``eps``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .costs import RunningCost
from .dynamics import LtvModel, psd_sqrt, rollout


class DegenerateTemperature(ValueError):
    """Raised when the MPPI temperature is zero and weights are undefined."""


@dataclass(frozen=True)
class MppiParams:
    T: int = 40
    K: int = 100
    lam: float = 0.1
    nu: float = 0.1
    eps_cov: np.ndarray = field(default_factory=lambda: 0.001 * np.eye(2))
    R: np.ndarray = field(default_factory=lambda: np.eye(2))

    def __post_init__(self):
        object.__setattr__(self, "eps_cov", np.atleast_2d(np.asarray(self.eps_cov, dtype=float)))
        object.__setattr__(self, "R", np.atleast_2d(np.asarray(self.R, dtype=float)))
        if self.T < 1 or self.K < 1:
            raise ValueError("MPPI horizon and sample count must be >= 1")
        if self.lam < 0:
            raise ValueError("temperature must be nonnegative")
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if np.linalg.eigvalsh(0.5 * (self.eps_cov + self.eps_cov.T))[0] <= 0:
            raise ValueError("sampling covariance must be positive definite")


@dataclass(frozen=True)
class ReferencePlan:
    states: np.ndarray  # (T+1, n_x)
    controls: np.ndarray  # (T, n_u)

    @property
    def T(self) -> int:
        return len(self.controls)

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]


def _perturbation_cost(v, eps, R, nu) -> np.ndarray:
    """Control part of the path cost, summed over stages.

    ``v`` has shape ``(T, n_u)``, ``eps`` has shape ``(..., T, n_u)``.
    """
    Rv = v @ R.T
    nominal = 0.5 * np.sum(v * Rv)
    cross = np.einsum("...ti,ti->...", eps, Rv)
    quad = np.einsum("...ti,ij,...tj->...", eps, R, eps)
    return nominal + 0.5 * (cross + (1.0 - 1.0 / nu) * quad)


def rollout_states(model: LtvModel, x0, controls) -> np.ndarray:
    """Noise-free rollouts for a batch of control sequences ``(..., T, n_u)``."""
    controls = np.asarray(controls, dtype=float)
    T = controls.shape[-2]
    X = np.empty(controls.shape[:-2] + (T + 1, model.n_x))
    X[..., 0, :] = x0
    for k in range(T):
        X[..., k + 1, :] = X[..., k, :] @ model.A_seq[k].T + controls[..., k, :] @ model.B_seq[k].T
    return X


def rollout_costs(model: LtvModel, x0, v, eps, cost: RunningCost, params: MppiParams) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if v.shape[0] != params.T or eps.shape[-2] != params.T:
        raise ValueError(f"sequence lengths must equal the horizon {params.T}")
    X = rollout_states(model, x0, v + eps)
    running = np.sum(cost(X[..., :-1, :]), axis=-1)
    return cost.terminal(X[..., -1, :]) + running + _perturbation_cost(v, eps, params.R, params.nu)


def rollout_cost(model: LtvModel, x0, v, eps, cost: RunningCost, params: MppiParams) -> float:
    """Path cost of one perturbed control sequence ``v + eps``."""
    return float(rollout_costs(model, x0, v, eps, cost, params))


def weights(costs, lam: float) -> np.ndarray:
    costs = np.asarray(costs, dtype=float)
    if costs.size < 1:
        raise ValueError("need at least one cost")
    if lam == 0:
        raise DegenerateTemperature("temperature is zero; weights are an argmin indicator")
    if lam < 0:
        raise ValueError("temperature must be nonnegative")
    omega = np.exp(-(costs - costs.min()) / lam)
    return omega / omega.sum()


def mppi_step(model: LtvModel, x0, warm, cost: RunningCost, params: MppiParams,
              rng: np.random.Generator) -> ReferencePlan:
    """One MPPI update around ``warm``; returns the averaged plan and its rollout."""
    warm = np.asarray(warm, dtype=float)
    if warm.shape[0] != params.T:
        raise ValueError(f"warm start has length {warm.shape[0]}, expected {params.T}")
    L = psd_sqrt(params.eps_cov)
    eps = rng.standard_normal((params.K, params.T, warm.shape[1])) @ L.T
    C = rollout_costs(model, x0, warm, eps, cost, params)
    try:
        w = weights(C, params.lam)
    except DegenerateTemperature:
        w = np.zeros(params.K)
        w[np.argmin(C)] = 1.0
    controls = warm + np.tensordot(w, eps, axes=1)
    return ReferencePlan(rollout(model, x0, controls), controls)


def shift_warm_start(controls) -> np.ndarray:
    controls = np.asarray(controls, dtype=float)
    if controls.shape[0] == 0:
        raise ValueError("cannot shift an empty sequence")
    return np.concatenate([controls[1:], np.zeros_like(controls[:1])])
