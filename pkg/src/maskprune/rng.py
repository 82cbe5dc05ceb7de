"""Counter-based random streams.

Every random draw in the toolkit comes from a Philox generator keyed by a
tuple of integers (seed, epoch, index, ...), so results never depend on
execution order or thread count.
"""

from __future__ import annotations

import numpy as np

__all__ = ["keyed_rng"]


def keyed_rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))
