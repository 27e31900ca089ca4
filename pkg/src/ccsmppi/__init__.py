"""MPPI planning corrected by chance-constrained covariance steering."""

from .ccs import CcsProblem, CcsSolution, FeedbackPolicy, solve_ccs
from .config import ScenarioConfig, builtin_config, load_config
from .controller import CcsMppiConfig, Scenario, run_episode
from .harness import run_batch

__all__ = [
    "CcsMppiConfig",
    "CcsProblem",
    "CcsSolution",
    "FeedbackPolicy",
    "Scenario",
    "ScenarioConfig",
    "builtin_config",
    "load_config",
    "run_batch",
    "run_episode",
    "solve_ccs",
]
