"""Counter-based random streams.

A stream is identified by ``(seed, stream_id)`` and backed by numpy's Philox
bit generator keyed with those two words, so every stream replays exactly and
distinct stream ids are independent. Child streams are derived by hashing
(parent id, label) through ``SeedSequence`` so work can be split across
scenes, trials or workers without depending on scheduling order.
"""
from dataclasses import dataclass, field
from typing import Union

import numpy as np

_MASK64 = (1 << 64) - 1


def _derive_id(seed: int, stream_id: int, label: Union[int, str]) -> int:
    if isinstance(label, str):
        label = int.from_bytes(label.encode('utf-8')[:16].ljust(16, b'\0'), 'little')
    entropy = [seed & _MASK64, stream_id & _MASK64, int(label) & ((1 << 128) - 1)]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


@dataclass
class RngStream:
    seed: int
    stream_id: int = 0
    counter: int = 0
    _generator: np.random.Generator = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        bitgen = np.random.Philox(key=key)
        if self.counter:
            bitgen.advance(self.counter)
        self._generator = np.random.Generator(bitgen)

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def child(self, label: Union[int, str]) -> 'RngStream':
        """Independent stream derived from this one; does not consume values."""
        return RngStream(self.seed, _derive_id(self.seed, self.stream_id, label))

    def state(self) -> dict:
        """Full generator position, JSON-serialisable, for checkpoints."""
        st = self._generator.bit_generator.state
        return {
            'seed': int(self.seed),
            'stream_id': int(self.stream_id),
            'counter': [int(c) for c in st['state']['counter']],
            'buffer': [int(c) for c in st['buffer']],
            'buffer_pos': int(st['buffer_pos']),
            'has_uint32': int(st['has_uint32']),
            'uinteger': int(st['uinteger']),
        }

    # thin passthroughs used throughout the package

    def random(self, size=None):
        return self._generator.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._generator.integers(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._generator.normal(loc, scale, size)

    def permutation(self, n):
        return self._generator.permutation(n)


def restore_stream(state: dict) -> RngStream:
    """Rebuild a stream at the exact position captured by ``RngStream.state``."""
    stream = RngStream(int(state['seed']), int(state['stream_id']))
    bitgen = stream.generator.bit_generator
    st = bitgen.state
    st['state']['counter'] = np.array(state['counter'], dtype=np.uint64)
    st['buffer'] = np.array(state['buffer'], dtype=np.uint64)
    st['buffer_pos'] = int(state['buffer_pos'])
    st['has_uint32'] = int(state['has_uint32'])
    st['uinteger'] = int(state['uinteger'])
    bitgen.state = st
    return stream
