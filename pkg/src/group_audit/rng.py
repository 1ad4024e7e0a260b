"""Counter-based random substreams.

Every random draw in the package comes from a Philox-4x64 generator keyed
by ``SeedSequence(master_seed, spawn_key=(domain, *key))``. A substream
depends only on its key, never on how many workers run or in which order,
so outputs are identical at any thread count.
"""

import numpy as np

SYNTH = 0
FOREST = 1


def substream(master_seed: int, domain: int, *key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(int(domain),) + tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))


def tree_stream(master_seed: int, year: int, tree_index: int) -> np.random.Generator:
    """Substream consumed by tree ``tree_index`` of the forest for ``year``."""
    return substream(master_seed, FOREST, year, tree_index)


def synth_stream(master_seed: int, year: int, block: int) -> np.random.Generator:
    return substream(master_seed, SYNTH, year, block)
