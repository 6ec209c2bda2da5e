"""Counter-based random streams keyed by ``(seed, stream ids...)``.

No module keeps global random state; every consumer asks for its own stream.
"""

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _word(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & _MASK64


def stream(seed, *ids):
    """Return an independent ``numpy.random.Generator`` for ``(seed, *ids)``.

    Ids may be ints or short strings; strings are hashed with CRC32 so the
    mapping is stable across processes and platforms.
    """
    entropy = [_word(seed)] + [_word(i) for i in ids]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
