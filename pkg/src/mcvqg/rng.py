"""Counter-based random streams for reproducible stochastic passes."""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    digest = hashlib.blake2b(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """Splittable counter-based random stream (Philox under the hood).

    Every draw is fully determined by (seed, stream, counter): replaying a
    stream with the same state replays its draws bitwise, and sibling streams
    derived via `child` are statistically independent, so Monte-Carlo samples
    can be produced in any order without changing their values. Each draw
    call occupies its own counter block, so the sizes of earlier draws never
    shift later ones.
    """

    __slots__ = ("seed", "stream", "counter")

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self.counter = int(counter)

    def child(self, tag) -> "RngStream":
        """Derive an independent stream; same (parent, tag) -> same child."""
        mixed = _splitmix64(self.stream ^ _splitmix64(_tag_to_int(tag)))
        return RngStream(self.seed, mixed)

    def state(self):
        return (self.seed, self.stream, self.counter)

    def _generator(self) -> np.random.Generator:
        bits = np.random.Philox(key=[self.seed, self.stream],
                                counter=[0, self.counter, 0, 0])
        self.counter += 1
        return np.random.Generator(bits)

    def uniform(self, shape=()):
        """Uniform float64 draws on [0, 1)."""
        return self._generator().random(shape)

    def normal(self, shape=()):
        """Standard normal float64 draws."""
        return self._generator().standard_normal(shape)

    def integers(self, low: int, high: int, shape=()):
        """Integer draws on [low, high)."""
        return self._generator().integers(low, high, size=shape)

    def shuffled(self, seq):
        """A shuffled copy of `seq` (the stream advances by one draw call)."""
        out = list(seq)
        self._generator().shuffle(out)
        return out

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream}, counter={self.counter})"
