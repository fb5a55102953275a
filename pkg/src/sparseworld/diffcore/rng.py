"""Counter-based deterministic random streams.

Every random draw in the repo (scene sampling, weight init, Gumbel noise,
batch shuffling) goes through an RngStream so that a single 64-bit seed pins
the whole experiment. The generator is splitmix64 applied to a running
counter: draw i of a stream is ``mix64(key + (i+1) * GOLDEN)`` where ``key``
is derived from (seed, stream). Integer hashing makes the bit stream exact
across platforms and numpy versions; no state beyond (seed, stream, counter)
exists, so any draw can be replayed from those three numbers.

Child streams are derived by hashing a string label (blake2b, stdlib), which
gives a documented, collision-resistant way to split one master seed into
per-episode / per-layer / per-batch streams.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64


def mix64(x: np.ndarray | int) -> np.ndarray:
    """splitmix64 finalizer; wraps mod 2**64 like the reference C code."""
    z = np.asarray(x, dtype=np.uint64)
    old = np.seterr(over="ignore")
    try:
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        z = z ^ (z >> _U64(31))
    finally:
        np.seterr(**old)
    return z


def _label_hash(label: str | int) -> int:
    if isinstance(label, int):
        return label & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """One independent random stream, identified by (seed, stream).

    identical (seed, stream, counter) always produces identical draws.
    """

    algorithm = "splitmix64"

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)
        key = mix64(_U64(self.seed)) ^ mix64(_U64(self.stream) + _GOLDEN)
        self._key = _U64(key)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream}, counter={self.counter})"

    def state(self) -> tuple[int, int, int]:
        return (self.seed, self.stream, self.counter)

    def child(self, label: str | int) -> "RngStream":
        """Derive an independent stream; counter starts at zero."""
        return RngStream(seed=int(mix64(self._key ^ mix64(_U64(_label_hash(label))))), stream=0)

    def _words(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        old = np.seterr(over="ignore")
        try:
            out = mix64(self._key + idx * _GOLDEN)
        finally:
            np.seterr(**old)
        return out

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform on the open interval (0, 1), float64."""
        n = int(np.prod(shape)) if shape else 1
        u = ((self._words(n) >> _U64(11)).astype(np.float64) + 0.5) * (2.0**-53)
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal via Box-Muller (two uniforms per sample)."""
        n = int(np.prod(shape)) if shape else 1
        u1 = self.uniform((n,))
        u2 = self.uniform((n,))
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
        return z.reshape(shape) if shape else z[0]

    def logistic(self, shape=()) -> np.ndarray:
        """Standard logistic noise, log(u) - log(1-u)."""
        u = self.uniform(shape)
        return np.log(u) - np.log1p(-u)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high). Uses rejection-free modulo; fine for our ranges."""
        n = int(np.prod(shape)) if shape else 1
        span = _U64(high - low)
        vals = (self._words(n) % span).astype(np.int64) + low
        return vals.reshape(shape) if shape else int(vals[0])

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        swaps = self._words(n)
        for i in range(n - 1, 0, -1):
            j = int(swaps[n - 1 - i] % _U64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
