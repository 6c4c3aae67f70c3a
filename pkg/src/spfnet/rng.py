"""Counter-based splitmix64 random streams.

Every consumer (parameter init, dropout, data order, bootstrap) draws from
its own stream.  A stream is identified by ``(seed, label, *path)``; the
label and path are hashed with FNV-1a and folded into a 64-bit key, and the
i-th draw of the stream is ``mix64(key + (i + 1) * GOLDEN)``, i.e. exactly
the output sequence of a splitmix64 generator whose state starts at ``key``.
Because draws only depend on ``(key, counter)`` the sequence is identical on
every platform with IEEE doubles.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """splitmix64 finalizer on a Python int."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


def stream_key(seed: int, label: str, *path: object) -> int:
    key = mix64(int(seed) & _MASK)
    for part in (label, *path):
        key = mix64(key ^ fnv1a64(str(part)))
    return key


class PrngState:
    """One independent stream of 64-bit draws.

    Parameters
    ----------
    seed : int
        Unsigned 64-bit run seed.
    stream : str
        Consumer label, e.g. ``"init"``, ``"dropout"``, ``"data"``.
    *path
        Optional sub-stream qualifiers (epoch number, parameter name, ...).
    """

    def __init__(self, seed: int, stream: str, *path: object):
        if not 0 <= int(seed) <= _MASK:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.stream = stream
        self.path = tuple(path)
        self.key = stream_key(self.seed, stream, *path)
        self.counter = 0

    def __repr__(self) -> str:
        return f"PrngState(seed={self.seed}, stream={self.stream!r}, path={self.path}, counter={self.counter})"

    def spawn(self, *path: object) -> "PrngState":
        """Derive a sub-stream; does not advance this stream."""
        return PrngState(self.seed, self.stream, *self.path, *path)

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(GOLDEN)
            return _mix64_array(z)

    def uniform(self, n: int) -> np.ndarray:
        """Float64 draws in [0, 1) built from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n: int) -> np.ndarray:
        # Box-Muller; u1 is shifted into (0, 1] so the log is finite.
        u = self.uniform(2 * n)
        u1 = 1.0 - u[:n]
        u2 = u[n:]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """Integers in ``[low, high)`` by scaling uniforms (bias below 2**-40 for small ranges)."""
        if high <= low:
            raise ValueError("empty integer range")
        return low + np.floor(self.uniform(n) * (high - low)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64(n), kind="stable")
