"""State-dependent running costs for the obstacle and circular-track tasks.

All cost functions broadcast over leading batch dimensions: positions have
shape ``(..., 2)`` and full states ``(..., 4)`` ordered ``(p_x, p_y, v_x, v_y)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

#: Penalty charged per violated indicator (obstacle hit or leaving the track).
INDICATOR_PENALTY = 5000.0


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"obstacle radius must be >= 0, got {self.radius}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "radius", float(self.radius))

    def contains(self, p) -> np.ndarray:
        """Closed-disk membership ``||p - s|| <= r``."""
        d = np.asarray(p, dtype=float) - np.asarray(self.center)
        return np.linalg.norm(d, axis=-1) <= self.radius


def obstacle_hits(p, obstacles: Sequence[Obstacle]) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    hits = np.zeros(p.shape[:-1], dtype=int)
    for obs in obstacles:
        hits = hits + obs.contains(p)
    return hits


def q_hard(p, p_des, obstacles: Sequence[Obstacle]) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    d = p - np.asarray(p_des, dtype=float)
    return np.sum(d * d, axis=-1) + INDICATOR_PENALTY * obstacle_hits(p, obstacles)


def _track_common(x, R_c: float, v_des: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    px, py, vx, vy = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    speed = np.hypot(vx, vy)
    # angular-momentum term is a scalar absolute value
    return (speed - v_des) ** 2 + np.abs(px * vy - vx * py - R_c * v_des)


def q_track_soft(x, R_c: float, v_des: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    radius = np.hypot(x[..., 0], x[..., 1])
    return _track_common(x, R_c, v_des) + 100.0 * (radius - R_c) ** 2


def in_track(p, R_c: float, band: float) -> np.ndarray:
    """Closed annulus ``R_c - band <= ||p|| <= R_c + band``."""
    radius = np.linalg.norm(np.asarray(p, dtype=float), axis=-1)
    return (radius >= R_c - band) & (radius <= R_c + band)


def q_track_hard(x, R_c: float, v_des: float, band: float = 0.125) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    outside = ~in_track(x[..., :2], R_c, band)
    return _track_common(x, R_c, v_des) + INDICATOR_PENALTY * outside


COST_TAGS = ("obstacle-goal", "track-soft", "track-hard")


@dataclass(frozen=True)
class RunningCost:
    """A tagged running cost ``scale * q(x)`` with zero terminal cost.

    ``tag`` selects the formula; the remaining fields are its parameters.
    """

    tag: str
    scale: float = 1.0
    p_des: tuple[float, float] = (0.0, 0.0)
    obstacles: tuple[Obstacle, ...] = field(default_factory=tuple)
    R_c: float = 2.0
    v_des: float = 6.0
    band: float = 0.125

    def __post_init__(self):
        if self.tag not in COST_TAGS:
            raise ValueError(f"unknown cost tag {self.tag!r}; expected one of {COST_TAGS}")
        if self.scale < 0:
            raise ValueError("cost scale must be nonnegative")
        if self.tag != "obstacle-goal" and not self.band > 0:
            raise ValueError("track band half-width must be positive")

    def base(self, x) -> np.ndarray:
        """Unscaled ``q(x)``."""
        x = np.asarray(x, dtype=float)
        if self.tag == "obstacle-goal":
            return q_hard(x[..., :2], self.p_des, self.obstacles)
        if self.tag == "track-soft":
            return q_track_soft(x, self.R_c, self.v_des)
        return q_track_hard(x, self.R_c, self.v_des, self.band)

    def __call__(self, x) -> np.ndarray:
        return self.scale * self.base(x)

    def terminal(self, x) -> np.ndarray:
        return np.zeros(np.shape(x)[:-1])
