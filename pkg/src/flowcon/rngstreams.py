"""Named substreams derived from a single master seed.

Every source of randomness in the package (parameter init, epoch shuffling,
OOD subsampling, synthetic data) draws from its own stream so that toggling
one consumer never perturbs another.  Streams are derived through
``SeedSequence([master_seed, stream_id, *extra])``, which also makes
epoch-level resume exact: the shuffle order of epoch ``e`` depends only on
``(seed, e)``, never on how many draws earlier epochs consumed.
"""

from __future__ import annotations

import os

import numpy as np

STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_SUBSAMPLE = 3
STREAM_SYNTH = 4
STREAM_SPLIT = 5


def substream(seed: int, stream: int, *extra: int) -> np.random.Generator:
    """Generator for a named stream of the master seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream, *extra])))


def worker_count() -> int:
    """Worker cap for read-only parallel scoring.

    ``FLOWCON_THREADS`` overrides; 1 forces the serial bit-determinism path.
    """
    raw = os.environ.get("FLOWCON_THREADS", "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError:
            n = 1
        return max(1, n)
    return os.cpu_count() or 1
