"""Randomized invariant checks across the modules.

Each check draws ``trials`` random instances and counts the ones that break
the property. ``run_all`` is what ``ccsmppi verify`` executes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ccs import CcsProblem, FeedbackPolicy, assemble_moments, constraint_margins, solve_ccs
from .controller import CcsMppiConfig, Scenario, run_episode
from .costs import Obstacle, RunningCost
from .dynamics import GaussianBelief, LtvModel, build_lifted, make_double_integrator, rollout
from .halfspace import HalfspaceSet, obstacle_halfspace
from .mppi import MppiParams, ReferencePlan, rollout_states, weights


@dataclass(frozen=True)
class CheckResult:
    name: str
    trials: int
    failures: int
    worst: float  # largest observed violation of the property's tolerance

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name}: {self.trials - self.failures}/{self.trials} (worst {self.worst:.2e})"


def _random_psd(rng, n, rank=None):
    rank = n if rank is None else rank
    F = rng.standard_normal((n, rank))
    return F @ F.T


def _random_model(rng) -> LtvModel:
    N = int(rng.integers(1, 8))
    n_x = int(rng.integers(2, 5))
    n_u = int(rng.integers(1, 4))
    A = rng.standard_normal((N, n_x, n_x)) / np.sqrt(n_x)
    B = rng.standard_normal((N, n_x, n_u))
    W = np.array([_random_psd(rng, n_x, int(rng.integers(0, n_x + 1))) for _ in range(N)])
    return LtvModel.from_arrays(A, B, W)


def check_lifted_equivalence(trials: int, rng) -> CheckResult:
    """Stacked matrices reproduce the sequential rollout."""
    worst, fails = 0.0, 0
    for _ in range(trials):
        model = _random_model(rng)
        x0 = rng.standard_normal(model.n_x)
        u = rng.standard_normal((model.N, model.n_u))
        w = rng.standard_normal((model.N, model.n_x))
        seq = rollout(model, x0, u, w).ravel()
        lifted = build_lifted(model).apply(x0, u, w)
        err = np.abs(seq - lifted).max() / max(1.0, np.abs(seq).max())
        worst = max(worst, err)
        fails += err > 1e-9
    return CheckResult("lifted/sequential equivalence", trials, fails, worst)


def check_halfspace_containment(trials: int, rng) -> CheckResult:
    """Every obstacle point lies on the unsafe side; outside points keep their distance margin."""
    worst, fails = 0.0, 0
    angles = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    ring = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    for _ in range(trials):
        obs = Obstacle(rng.uniform(-5, 5, 2), rng.uniform(0.1, 3.0))
        p = rng.uniform(-8, 8, 2)
        h = obstacle_halfspace(p, obs)
        boundary = np.asarray(obs.center) + obs.radius * ring
        viol = max(0.0, float(h.margin(boundary).max()) - 1e-9)
        d = np.linalg.norm(p - np.asarray(obs.center))
        if d > 0:
            viol = max(viol, abs(float(h.margin(p)) - (d - obs.radius)) - 1e-9)
        worst = max(worst, viol)
        fails += viol > 0
    return CheckResult("half-space containment", trials, fails, worst)


def check_weights(trials: int, rng) -> CheckResult:
    """Weights are a probability vector and ignore a common cost offset."""
    worst, fails = 0.0, 0
    for _ in range(trials):
        K = int(rng.integers(1, 300))
        costs = rng.normal(0, 10 ** rng.uniform(-2, 4), K)
        lam = 10 ** rng.uniform(-3, 2)
        w = weights(costs, lam)
        shifted = weights(costs + rng.uniform(-1e3, 1e3), lam)
        err = max(abs(w.sum() - 1.0), float(-w.min()), float(np.abs(w - shifted).max()))
        worst = max(worst, err)
        fails += err > 1e-9
    return CheckResult("weight normalization/shift invariance", trials, fails, worst)


def check_tightening_monotone(trials: int, rng) -> CheckResult:
    """Lowering the failure probability never loosens a constraint margin."""
    worst, fails = 0.0, 0
    for _ in range(trials):
        N = int(rng.integers(1, 6))
        model = make_double_integrator(0.05, N, np.diag(rng.uniform(0, 1, 4)))
        lifted = build_lifted(model)
        init = GaussianBelief(rng.standard_normal(4), _random_psd(rng, 4) * 0.1)
        policy = FeedbackPolicy(rng.standard_normal(2 * N), rng.standard_normal((N, 2, 4)),
                                rng.standard_normal((max(N - 1, 0), 2, 4)))
        ref = ReferencePlan(np.zeros((N + 1, 4)), np.zeros((N, 2)))
        hs = HalfspaceSet(tuple(obstacle_halfspace(rng.standard_normal(2) * 3,
                                                   Obstacle(rng.standard_normal(2), 0.5), int(rng.integers(0, N + 1)))
                                for _ in range(3)))
        p_lo, p_hi = np.sort(rng.uniform(1e-4, 0.5, 2))
        mu_x, zeta, *_ = assemble_moments(lifted, init, policy, model.W_seq)
        margins = []
        for p in (p_lo, p_hi):
            prob = CcsProblem(lifted, init, ref, np.eye(4), np.eye(2), hs, float(p), model.W_seq)
            margins.append(constraint_margins(prob, mu_x, zeta))
        viol = max(0.0, float((margins[0] - margins[1]).max()) - 1e-12)
        worst = max(worst, viol)
        fails += viol > 0
    return CheckResult("monotone tightening in p_fail", trials, fails, worst)


def random_ccs_problem(rng, p_fail: float = 0.01, N: int | None = None, n_obstacles: int = 2) -> CcsProblem:
    """A small double-integrator steering problem around a random straight-ish reference."""
    N = int(rng.integers(2, 7)) if N is None else N
    W = np.diag(np.concatenate([rng.uniform(0, 1e-4, 2), rng.uniform(1e-3, 1e-1, 2)]))
    model = make_double_integrator(0.1, N, W)
    x0 = np.concatenate([rng.uniform(-0.5, 0.5, 2), rng.uniform(-1, 1, 2)])
    controls = rng.normal(0, 1, (N, 2))
    states = rollout_states(model, x0, controls)
    ref = ReferencePlan(states, controls)
    entries = []
    for j in range(n_obstacles):
        # obstacle beside the path at a distance where constraints tend to bind,
        # redrawn until the (uncontrollable) initial position clears it
        while True:
            ell = int(rng.integers(1, N + 1))
            direction = rng.standard_normal(2)
            direction /= np.linalg.norm(direction)
            radius = rng.uniform(0.2, 0.6)
            center = states[ell, :2] + direction * (radius + rng.uniform(0.0, 0.3))
            if np.linalg.norm(x0[:2] - center) > radius + 0.1:
                break
        obs = Obstacle(center, radius)
        entries += [obstacle_halfspace(states[k, :2], obs, k, f"obstacle-{j}") for k in range(N + 1)]
    init = GaussianBelief(x0, _random_psd(rng, 4) * 1e-3 * rng.uniform(0, 1))
    return CcsProblem(build_lifted(model), init, ref, np.diag([10.0, 10.0, 1.0, 1.0]), np.eye(2),
                      HalfspaceSet(tuple(entries)), p_fail, model.W_seq)


def check_objective_monotone(trials: int, rng) -> CheckResult:
    """A smaller failure probability never yields a lower optimal objective."""
    worst, fails, done = 0.0, 0, 0
    while done < trials:
        base = random_ccs_problem(rng)
        p_lo, p_hi = np.sort(rng.uniform(1e-3, 0.5, 2))
        lo = solve_ccs(replace_p_fail(base, float(p_lo)))
        hi = solve_ccs(replace_p_fail(base, float(p_hi)))
        if hi.status != "optimal":
            continue  # the looser problem already needs slack; nothing to compare
        done += 1
        if lo.status != "optimal":
            continue  # tighter problem infeasible: consistent with monotonicity
        gap = max(0.0, hi.objective - lo.objective - 1e-6 * max(1.0, abs(hi.objective)))
        worst = max(worst, gap)
        fails += gap > 0
    return CheckResult("monotone optimal objective in p_fail", trials, fails, worst)


def replace_p_fail(problem: CcsProblem, p_fail: float) -> CcsProblem:
    return CcsProblem(problem.lifted, problem.init, problem.reference, problem.Q, problem.R,
                      problem.halfspaces, p_fail, problem.W_seq)


def _small_episode(rng):
    """A short closed-loop CCSMPPI run with a low reset threshold so resets occur."""
    T_max = 20
    W = np.diag(np.concatenate([rng.uniform(0, 1e-4, 2), rng.uniform(1e-3, 5e-2, 2)]))
    model = make_double_integrator(0.05, T_max, W)
    obs = (Obstacle(rng.uniform(-1, 1, 2) + (0.0, 2.0), 0.5),)
    cost = RunningCost("obstacle-goal", 10.0, (0.0, 4.0), obs)
    scenario = Scenario(model, cost, np.zeros(4), T_max, obs)
    config = CcsMppiConfig(T_max, 5, MppiParams(T=10, K=20), sigma_max=float(rng.uniform(0.005, 0.1)))
    return scenario, config, run_episode(config, scenario, int(rng.integers(0, 2**31)))


def check_covariance_replay(trials: int, rng) -> tuple[CheckResult, CheckResult]:
    """Recorded covariances follow the propagation formula between resets, and resets zero them.

    Episodes are drawn until both kinds of step have been seen ``trials`` times.
    """
    n_replay = n_reset = 0
    replay_worst = reset_worst = 0.0
    replay_fail = reset_fail = 0
    while n_replay < trials or n_reset < trials:
        scenario, config, rec = _small_episode(rng)
        model = scenario.model
        for k in range(rec.T):
            AL = model.A_seq[k] + model.B_seq[k] @ rec.gains[k]
            pred = AL @ rec.covariance[k] @ AL.T + model.W_seq[k]
            lam = float(np.linalg.eigvalsh(0.5 * (pred + pred.T))[-1])
            if lam > config.sigma_max:
                n_reset += 1
                # zero covariance, flagged, and the next plan anchored on the measured state
                err = float(np.abs(rec.covariance[k + 1]).max())
                if k + 1 < rec.T:
                    err = max(err, float(np.abs(rec.nominal[k + 1] - rec.states[k + 1]).max()))
                err = max(err, 0.0 if rec.reset[k] else 1.0)
                reset_worst = max(reset_worst, err)
                reset_fail += err > 0
            else:
                n_replay += 1
                err = float(np.abs(rec.covariance[k + 1] - pred).max())
                err = max(err, 1.0 if rec.reset[k] else 0.0)
                replay_worst = max(replay_worst, err)
                replay_fail += err > 1e-12
    return (CheckResult("covariance recursion replay", n_replay, replay_fail, replay_worst),
            CheckResult("reset soundness", n_reset, reset_fail, reset_worst))


CHECKS = {
    "lifted": check_lifted_equivalence,
    "halfspace": check_halfspace_containment,
    "weights": check_weights,
    "tightening": check_tightening_monotone,
    "objective": check_objective_monotone,
}


def run_all(trials: int = 200, seed: int = 0) -> list[CheckResult]:
    results = []
    for i, fn in enumerate(CHECKS.values()):
        results.append(fn(trials, np.random.default_rng([seed, i])))
    results.extend(check_covariance_replay(trials, np.random.default_rng([seed, len(CHECKS)])))
    return results
