"""Named, stage-indexed random streams.

Every consumer of randomness asks for ``stream(seed, purpose, k)`` so draws at
stage ``k`` do not depend on how many numbers other consumers used before.
"""

from __future__ import annotations

import numpy as np

PLANT_NOISE = 0
MPPI_SAMPLING = 1
INITIAL_STATE = 2


def stream(seed: int, purpose: int, k: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(purpose), int(k)])
