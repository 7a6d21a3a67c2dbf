"""Deterministic RNG substreams derived from a single run seed.

Every source of randomness in a run (batch order, weight init, span masking,
SpecAugment, dataset splitting) draws from its own named substream keyed by
integer indices such as (epoch, batch). A generator is a pure function of
(seed, stream, *key), so any point of a run can be reconstructed exactly when
resuming from a checkpoint: no generator state ever needs to be serialized.
"""

from __future__ import annotations

import numpy as np

_STREAMS = {
    "data": 0,      # epoch shuffling
    "init": 1,      # parameter initialization
    "mask": 2,      # pretraining span masks
    "augment": 3,   # SpecAugment draws
    "split": 4,     # label-deficient splitting
    "synth": 5,     # synthetic corpus generation
}


def substream(seed: int, stream: str, *key: int) -> np.random.Generator:
    """Return the generator for (seed, stream, *key). Same inputs, same stream."""
    if stream not in _STREAMS:
        raise KeyError(f"unknown rng stream {stream!r}; expected one of {sorted(_STREAMS)}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_STREAMS[stream], *map(int, key)))
    return np.random.default_rng(ss)
