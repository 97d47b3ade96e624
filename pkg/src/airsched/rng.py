"""Purpose-keyed random streams.

Every random draw in a simulation comes from a generator keyed by
``(root_seed, purpose, *keys)``, so changing the policy under test never
perturbs the draws seen by data sampling or the channel.
"""

import numpy as np

PARTITION = 1
BATCH = 2
CHANNEL = 3
NOISE = 4
POLICY = 5
INIT = 6
PROBE = 7
SYNTHETIC = 8
ORACLE = 9


def stream(seed: int, purpose: int, *keys: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, purpose, *keys)``."""
    entropy = [int(seed), int(purpose), *(int(k) for k in keys)]
    if any(v < 0 for v in entropy):
        raise ValueError(f"stream keys must be non-negative, got {entropy}")
    return np.random.default_rng(np.random.SeedSequence(entropy))


def device_stream(seed: int, device_id: int, round_idx: int) -> np.random.Generator:
    """Mini-batch stream owned by one device for one round."""
    return stream(seed, BATCH, device_id, round_idx)
