"""Named deterministic random streams.

A stream is identified by ``(component, purpose, index)``. Its generator is
``PCG64(SeedSequence(master_seed, spawn_key=(crc32(component),
crc32(purpose), index)))``, so a stream's output never depends on which
other streams were created or in what order. That is what lets a sweep run
its SNR points serially or in parallel with identical results.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(label):
    return zlib.crc32(str(label).encode("utf-8"))


class Streams:
    def __init__(self, master_seed=0):
        self.master_seed = int(master_seed) & 0xFFFFFFFFFFFFFFFF

    def get(self, component, purpose="main", index=0):
        seq = np.random.SeedSequence(
            self.master_seed, spawn_key=(_key(component), _key(purpose), int(index))
        )
        return np.random.Generator(np.random.PCG64(seq))

    def child_seed(self, component, purpose="main", index=0):
        """A 63-bit integer seed derived from the named stream."""
        return int(self.get(component, purpose, index).integers(0, 2**63 - 1))


def seed_streams(master_seed):
    return Streams(master_seed)
