"""Supporting half-spaces that separate a reference trajectory from obstacles.

Each half-space is ``{p : a @ p - b >= 0}`` with a unit normal ``a``. For a
disk obstacle the boundary touches the disk at the projection of the
reference position, so the whole disk lies on the unsafe side.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .costs import Obstacle
from .mppi import ReferencePlan

logger = logging.getLogger(__name__)

_FALLBACK_DIRECTION = np.array([1.0, 0.0])


@dataclass(frozen=True)
class Halfspace:
    a: np.ndarray
    b: float
    stage: int = 0
    source: str = ""

    def margin(self, p) -> np.ndarray:
        """Signed value ``a @ p - b``; nonnegative on the safe side."""
        return np.asarray(p, dtype=float) @ self.a - self.b


@dataclass(frozen=True)
class Track:
    """Annulus ``R_c - band <= ||p|| <= R_c + band`` centred at the origin."""

    R_c: float = 2.0
    band: float = 0.125

    @property
    def R_in(self) -> float:
        return self.R_c - self.band

    @property
    def R_out(self) -> float:
        return self.R_c + self.band


def _unit(d: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(d)
    if n == 0.0:
        logger.warning("degenerate projection for %s; using +x normal", what)
        return _FALLBACK_DIRECTION.copy()
    return d / n


def obstacle_halfspace(p, obs: Obstacle, stage: int = 0, source: str = "") -> Halfspace:
    s = np.asarray(obs.center, dtype=float)
    a = _unit(np.asarray(p, dtype=float) - s, source or "obstacle")
    return Halfspace(a, float(a @ s + obs.radius), stage, source)


def keepin_halfspace(p, R_out: float, stage: int = 0, source: str = "track-outer") -> Halfspace:
    """Supporting half-space of the disk ``||q|| <= R_out`` at the projection of ``p``."""
    a = -_unit(np.asarray(p, dtype=float), source)
    return Halfspace(a, -float(R_out), stage, source)


@dataclass(frozen=True)
class HalfspaceSet:
    entries: tuple[Halfspace, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def at_stage(self, stage: int) -> list[Halfspace]:
        return [h for h in self.entries if h.stage == stage]

    @property
    def sources(self) -> list[str]:
        return list(dict.fromkeys(h.source for h in self.entries))

    def arrays(self):
        """Stacked ``(stages, normals, offsets)`` for vectorized evaluation."""
        if not self.entries:
            return np.zeros(0, dtype=int), np.zeros((0, 2)), np.zeros(0)
        return (
            np.array([h.stage for h in self.entries]),
            np.array([h.a for h in self.entries]),
            np.array([h.b for h in self.entries]),
        )


def hsgen(plan: ReferencePlan, obstacles: Sequence[Obstacle], track: Track | None = None,
          T_cs: int | None = None) -> HalfspaceSet:
    """Half-spaces for stages ``0..T_cs`` of the plan, one per (stage, source)."""
    T_cs = plan.T if T_cs is None else T_cs
    if T_cs > plan.T:
        raise ValueError(f"T_cs={T_cs} exceeds the plan horizon {plan.T}")
    inner = Obstacle((0.0, 0.0), track.R_in) if track is not None else None
    entries = []
    for ell in range(T_cs + 1):
        p = plan.positions[ell]
        for j, obs in enumerate(obstacles):
            entries.append(obstacle_halfspace(p, obs, ell, f"obstacle-{j}"))
        if track is not None:
            entries.append(obstacle_halfspace(p, inner, ell, "track-inner"))
            entries.append(keepin_halfspace(p, track.R_out, ell, "track-outer"))
    return HalfspaceSet(tuple(entries))
