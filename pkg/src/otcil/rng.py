"""Deterministic randomness policy for the whole engine.

Every random draw anywhere in the package flows through numpy's PCG64,
keyed by ``SeedSequence(entropy=seed, spawn_key=(tag, *parts))``.  The tag
identifies the consumer, the extra parts identify the unit of work (class
id, session/epoch/step, ...), so independent subsystems never share a
stream and any single draw can be reproduced in isolation.

PCG64 is a fixed, documented algorithm; streams are identical across
platforms and word sizes for a given (entropy, spawn_key).
"""

import zlib

import numpy as np

# Stream tags.  Never renumber: checkpointed runs depend on them.
TAG_SCHEDULE = 1       # class order shuffle in split_tasks
TAG_SYNTH = 2          # synthetic corpus construction
TAG_ATTR = 3           # per-class attribute subset sampling
TAG_SHUFFLE = 4        # minibatch order, per (session, epoch)
TAG_PSEUDO = 5         # pseudo-feature replay, per (session, epoch, step)
TAG_SPLIT = 6          # train/test split of unmarked bundles
TAG_RANDOM_SELECT = 7  # random-selection ablation scores, per image


def generator(seed: int, tag: int, *parts: int) -> np.random.Generator:
    """PCG64 generator for one (seed, tag, parts) work unit."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(tag),) + tuple(int(p) for p in parts))
    return np.random.Generator(np.random.PCG64(ss))


def stable_text_key(text: str) -> int:
    """Stable 32-bit key for a string (CRC32; not Python's salted hash)."""
    return zlib.crc32(text.encode("utf-8"))
