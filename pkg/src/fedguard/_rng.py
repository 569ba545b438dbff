"""Deterministic random streams keyed by (seed, purpose, ...).

Every stochastic decision draws from its own generator derived through
``numpy.random.SeedSequence``, so the result never depends on the order in
which clients are executed.
"""
import numpy as np

# stream purposes
INIT = 0
SELECT = 1
PARTITION = 2
CLIENT = 3
ATTACK = 4
SYNTHETIC = 5
GRADCHECK = 6


def stream(seed, *key):
    """Return a Generator for ``hash(seed, *key)``."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(seq))


def as_generator(rng):
    """Accept an int seed, a Generator or None."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return np.random.default_rng()
    return stream(rng)
