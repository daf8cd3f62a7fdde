"""Named, independent PRNG streams derived from one integer seed.

Streams are PCG64 generators keyed by ``SeedSequence(seed, spawn_key=(k,))``,
so adding draws to one subsystem never shifts another subsystem's numbers.
"""

import numpy as np

STREAMS = {
    "data": 0,
    "init": 1,
    "dropout": 2,
    "sampling": 3,
    "lora": 4,
    "relabel": 5,
}


def stream(seed: int, name: str, *sub: int) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown PRNG stream {name!r}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name], *map(int, sub)))
    return np.random.Generator(np.random.PCG64(ss))
