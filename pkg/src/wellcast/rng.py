"""Deterministic random-stream construction.

All stochastic code in the package draws from counter-based Philox streams
keyed by (seed, domain, index).  Distinct domains keep unrelated consumers
(data generation, training, dropout, per-path sampling noise) on
non-overlapping streams even when they share one user-facing seed.
"""

import numpy as np

DATA = 1
TRAIN = 2
DROPOUT = 3
PATH = 4
EVAL = 5


def stream(seed: int, domain: int, index: int = 0) -> np.random.Generator:
    """Return a Philox generator keyed by (seed, domain, index)."""
    ss = np.random.SeedSequence([int(seed), int(domain), int(index)])
    return np.random.Generator(np.random.Philox(ss))
