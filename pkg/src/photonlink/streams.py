"""Counter-based random streams: one independent Philox stream per (seed, trial, lane).

The Philox key holds (master_seed, lane) and the third counter word holds the
trial index, so a trial's draws never depend on which worker ran it or on how
many trials ran before it.
"""

import numpy as np

MASK64 = (1 << 64) - 1

LANE_PHYSICS = 0
LANE_SENT_BIT = 1
LANE_AUX = 2


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= MASK64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return seed


def trial_stream(master_seed: int, trial_index: int, lane: int = LANE_PHYSICS) -> np.random.Generator:
    if trial_index < 0:
        raise ValueError("trial_index must be >= 0")
    key = np.array([check_seed(master_seed), lane & MASK64], dtype=np.uint64)
    counter = np.array([0, 0, trial_index & MASK64, (trial_index >> 64) & MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
