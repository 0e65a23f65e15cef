"""Counter-based random streams.

Every draw is addressed by ``(seed, stream, block, element)``: a block of
uniforms is a pure function of its coordinates, so a swarm only has to carry
an integer block counter to resume its stream anywhere. The bit generator is
numpy's Philox4x64, keyed by ``(seed, stream)`` with the block id placed in
the second counter word so blocks never overlap.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# stream namespaces; frames use their index directly
STREAM_NETWORK = 1 << 62
STREAM_SEQUENCE = 1 << 61


def _generator(seed: int, stream: int, block: int) -> np.random.Generator:
    bitgen = np.random.Philox(
        key=np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64),
        counter=np.array([0, block & _MASK64, 0, 0], dtype=np.uint64),
    )
    return np.random.Generator(bitgen)


def uniform_block(seed: int, stream: int, block: int, shape) -> np.ndarray:
    """Uniform [0, 1) doubles for one addressed block."""
    return _generator(seed, stream, block).random(shape)


def normal_block(seed: int, stream: int, block: int, shape) -> np.ndarray:
    """Standard normal doubles for one addressed block."""
    return _generator(seed, stream, block).standard_normal(shape)
