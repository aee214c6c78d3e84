"""
Counter-based random streams.

A run has one master seed. Every consumer (round sampler, client, synthetic
generator) gets its own generator keyed by a stream tag and
integer counters, so results do not depend on call order or thread scheduling.
Centralized training reuses the stream of a lone client in round 1.
"""
from typing import Tuple

import numpy as np

STREAM_SELECT = 1
STREAM_CLIENT = 2
STREAM_SYNTH = 4


def derive_seed(seed: int, stream: int, *counters: int) -> np.random.SeedSequence:
    key: Tuple[int, ...] = (stream, *counters)
    return np.random.SeedSequence(entropy=seed, spawn_key=key)


def derive_rng(seed: int, stream: int, *counters: int) -> np.random.Generator:
    """
    Independent generator for (seed, stream, counters).

    Args:
        seed: master seed (non-negative)
        stream: one of the STREAM_* tags
        counters: round index, client index, epoch ...

    Returns:
        numpy Generator backed by Philox
    """
    return np.random.Generator(np.random.Philox(derive_seed(seed, stream, *counters)))


def round_rng(seed: int, t: int) -> np.random.Generator:
    return derive_rng(seed, STREAM_SELECT, t)


def client_rng(seed: int, t: int, client_index: int) -> np.random.Generator:
    return derive_rng(seed, STREAM_CLIENT, t, client_index)
