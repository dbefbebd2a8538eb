"""Named, order-independent random streams derived from one integer seed."""
import zlib

import numpy as np
import torch


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def seed_sequence(seed, *keys):
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))


def substream(seed, *keys):
    """Generator for the stream identified by ``keys`` under ``seed``.

    Streams are keyed, not drawn sequentially, so e.g. subject 3's noise does
    not depend on how many subjects were generated before it.
    """
    return np.random.default_rng(seed_sequence(seed, *keys))


def torch_generator(seed, *keys):
    state = seed_sequence(seed, *keys).generate_state(2, dtype=np.uint32)
    g = torch.Generator()
    g.manual_seed(int(state[0]) << 32 | int(state[1]))
    return g
