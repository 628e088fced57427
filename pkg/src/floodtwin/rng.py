"""Named, order-independent random streams.

Every stochastic draw in the package comes from a stream addressed by a
master seed plus a key such as ("forecast", cycle, member). Streams are
independent of each other and of the order they are created in, so runs
are reproducible for a given master seed regardless of scheduling or
thread count.
"""

import hashlib

import numpy as np


def _key_words(parts):
    # Stable 32-bit words from the textual key; sha256 so nearby keys
    # ("member 1" vs "member 2") give unrelated streams.
    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def stream(master_seed, *parts):
    """Return a ``numpy.random.Generator`` for the stream named by ``parts``.

    The same (master_seed, parts) always yields a generator producing the
    same sequence; distinct keys yield statistically independent streams.
    """
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(_key_words(parts)))
    return np.random.default_rng(ss)
