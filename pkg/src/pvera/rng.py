"""Counter-based deterministic random number generation.

Every random draw in the toolkit comes from an RngStream, a splittable
counter-based generator: the i-th output is a pure function of
(seed, stream_id, i), so replaying a stream is exact, draws are identical
across platforms, and independent components of an experiment can own
independent streams without coordinating.

The word function is the splitmix64 finalizer applied to a per-stream key
plus a Weyl sequence over the counter. Uniforms take the top 53 bits;
normal variates go through the inverse normal CDF so the mapping from
counter position to value never depends on evaluation order (unlike
rejection or pairwise schemes).
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64
_TWO_NEG53 = float(2.0 ** -53)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized over uint64 arrays (wrapping)."""
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


_MASK64 = 0xFFFFFFFFFFFFFFFF


def _mix64_scalar(x: int) -> int:
    return int(_mix64(np.array([x & _MASK64], dtype=np.uint64))[0])


def combine_ids(*ids: int) -> int:
    """Fold any number of integer ids into one 64-bit stream id."""
    h = 0
    for i in ids:
        h = _mix64_scalar((h ^ _mix64_scalar(i)) + 0x9E3779B97F4A7C15)
    return h


class RngStream:
    """Splittable counter-based generator.

    Identical (seed, stream_id) pairs produce bitwise-identical sequences;
    distinct stream_ids are statistically independent. The counter advances
    by exactly one per scalar drawn, so callers can assert how much
    randomness an operation consumed.
    """

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)
        key = _mix64_scalar(self.seed) ^ _mix64_scalar(self.stream_id + 0x632BE59BD9B4E019)
        self._key = np.uint64(_mix64_scalar(key))

    def clone(self) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.counter)

    def _words(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(self._key + idx * _GOLDEN)

    def uniforms(self, shape) -> np.ndarray:
        """Uniform draws in the open interval (0, 1), float64."""
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        w = self._words(n)
        u = ((w >> _U64(11)).astype(np.float64) + 0.5) * _TWO_NEG53
        return u.reshape(shape)

    def normals(self, shape) -> np.ndarray:
        """Standard normal draws via the inverse CDF, float64."""
        return ndtri(self.uniforms(shape))

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return float(lo + (hi - lo) * self.uniforms(())[()])

    def permutation(self, n: int) -> np.ndarray:
        """A uniform permutation of range(n) (argsort of n uniforms)."""
        return np.argsort(self.uniforms(n), kind="stable")

    def integers(self, n: int, high: int) -> np.ndarray:
        """n independent integers uniform on [0, high)."""
        return np.minimum((self.uniforms(n) * high).astype(np.int64), high - 1)


def stream_for(seed: int, *ids: int) -> RngStream:
    """Derive a purpose-specific stream from a base seed and integer ids."""
    return RngStream(seed, combine_ids(*ids))


class StreamDomain:
    """Registry of top-level ids so independent components never share a stream."""

    BACKBONE = 1
    BASIS = 2
    ADAPTER = 3
    SHUFFLE = 4
    SAMPLE = 5
    DATA = 6
    MC_EVAL = 7
