"""Counter-based random streams for reproducible path simulation.

Paths are split into fixed-size blocks. Block ``k`` of stream ``s`` draws
from a Philox generator keyed by ``(seed, s, k)``, so the numbers a path
sees depend only on its index, never on how work is scheduled.
"""

import numpy as np

BLOCK_SIZE = 2048

# stream tags; sources of ``mc_kernel`` use their own index
STREAM_INIT = 1_000_001
STREAM_NOISE = 1_000_002


def generator(seed, *key):
    """Return a Philox generator for the spawn key ``key`` under ``seed``."""
    if seed is None:
        raise ValueError("seed is mandatory")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


class PathNoise:
    """Per-step Gaussian increments for ``n_paths`` paths of dimension ``d``.

    Each call to :meth:`normal` advances every block's counter by one step.
    """

    def __init__(self, seed, stream, n_paths, d, block_size=BLOCK_SIZE):
        self.n_paths = int(n_paths)
        self.d = int(d)
        self._blocks = []
        for k, start in enumerate(range(0, self.n_paths, block_size)):
            stop = min(start + block_size, self.n_paths)
            self._blocks.append((start, stop, generator(seed, stream, k)))

    def normal(self):
        out = np.empty((self.n_paths, self.d))
        for start, stop, gen in self._blocks:
            out[start:stop] = gen.standard_normal((stop - start, self.d))
        return out

    def uniform(self):
        out = np.empty(self.n_paths)
        for start, stop, gen in self._blocks:
            out[start:stop] = gen.random(stop - start)
        return out
