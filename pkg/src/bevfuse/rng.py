"""Named, splittable random streams.

Every consumer asks for a stream by name; the stream is derived from the
run seed and a stable hash of the name, so adding a new consumer never
shifts the numbers another one sees.
"""
import zlib

import numpy as np


def _key(name):
    return zlib.crc32(name.encode("utf-8"))


def stream(seed, name):
    ss = np.random.SeedSequence(int(seed), spawn_key=(_key(name),))
    return np.random.Generator(np.random.PCG64(ss))


def substream(seed, *names):
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(ss))
