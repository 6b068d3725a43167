"""Deterministic random streams.

Every random draw in the package goes through :func:`stream`, which builds a
Philox (counter-based) generator from a root seed plus a tuple of integer
labels.  The labels act as a namespace: ``stream(seed, DRIVE, 3)`` is the
third drive's generator and never overlaps ``stream(seed, DRIVE, 4)``.
Philox output is specified bit-for-bit by numpy, so sub-seeds are stable
across platforms.
"""

import numpy as np

# namespace tags for stream splitting
CENTERS = 0
DRIVE = 1
INIT = 2
TRAIN = 3
QUERY = 4
SCENARIO = 5


def stream(seed, *labels):
    """Return an independent ``np.random.Generator`` for ``(seed, *labels)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(v) for v in labels))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed, *labels):
    """Derive a plain integer seed, for handing to code that wants an int."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(v) for v in labels))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
