import zlib

import numpy as np


def substream(seed, *names):
    """Independent generator for ``names`` derived from the global ``seed``."""
    key = [int(seed)] + [zlib.crc32(str(name).encode("utf-8")) for name in names]
    return np.random.default_rng(key)
