"""Counter-based random streams keyed by (master seed, path index, stream)."""

import numpy as np

# stream ids; kept distinct so that e.g. the Brownian draws of a path do not
# depend on how many jump marks were sampled before them
BROWNIAN = 0
JUMPS = 1
BRIDGE = 2
MARKS = 3
EXIT_CLOCK = 4


def path_seed(master_seed: int, path_index: int) -> int:
    """Deterministic per-path seed derived from the ensemble master seed."""
    ss = np.random.SeedSequence([int(master_seed), int(path_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stream(seed: int, stream_id: int) -> np.random.Generator:
    """Philox generator for one (path seed, stream) pair."""
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream_id)])
    return np.random.Generator(np.random.Philox(key))
