"""Keyed, hierarchically addressed random streams.

Every draw in a run is a pure function of ``(master seed, stream path)``.  A
path is an ordered tuple of ``(tag, index)`` labels; its canonical byte
encoding is hashed together with the seed into a 128-bit Philox key, and the
stream is the Philox4x64 counter sequence under that key starting at counter 0.

Canonical encoding (all integers little-endian)::

    u64  master seed
    u32  number of labels
    per label:
        u32  len(tag utf-8) | tag bytes
        u8   0 -> u64 integer index
             1 -> u32 len(index utf-8) | index bytes (string index)

The key is ``blake2b(encoding, digest_size=16)`` read as a little-endian
integer.  Distinct encodings collide with probability about 2**-128 per pair.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np
from scipy import special

DEFAULT_SEED = 241103414

Index = Union[int, str]

_TWO_POW_M53 = 2.0 ** -53


def _check_label(tag: str, index: Index) -> tuple[str, Index]:
    if not isinstance(tag, str) or not tag:
        raise ValueError(f"stream tag must be a non-empty string, got {tag!r}")
    if isinstance(index, bool) or not isinstance(index, (int, str)):
        raise ValueError(f"stream index must be int or str, got {index!r}")
    if isinstance(index, int) and not 0 <= index < 2**64:
        raise ValueError(f"integer stream index out of u64 range: {index}")
    return tag, index


@dataclass(frozen=True)
class StreamPath:
    """Ordered ``(tag, index)`` labels addressing one substream."""

    labels: tuple[tuple[str, Index], ...]

    def __post_init__(self):
        object.__setattr__(
            self, "labels", tuple(_check_label(t, i) for t, i in self.labels)
        )

    @classmethod
    def of(cls, *labels: tuple[str, Index]) -> "StreamPath":
        return cls(tuple(labels))

    def child(self, tag: str, index: Index) -> "StreamPath":
        return StreamPath(self.labels + ((tag, index),))

    def encode(self) -> bytes:
        parts = [struct.pack("<I", len(self.labels))]
        for tag, index in self.labels:
            tb = tag.encode("utf-8")
            parts.append(struct.pack("<I", len(tb)) + tb)
            if isinstance(index, int):
                parts.append(b"\x00" + struct.pack("<Q", index))
            else:
                ib = index.encode("utf-8")
                parts.append(b"\x01" + struct.pack("<I", len(ib)) + ib)
        return b"".join(parts)

    def to_json(self) -> str:
        return json.dumps([[t, i] for t, i in self.labels], separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "StreamPath":
        return cls(tuple((t, i) for t, i in json.loads(text)))

    def __str__(self) -> str:
        return "/".join(f"{t}={i!r}" for t, i in self.labels)


def stream_key(seed: int, path: StreamPath) -> int:
    """128-bit Philox key for ``(seed, path)``."""
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    digest = hashlib.blake2b(
        struct.pack("<Q", int(seed)) + path.encode(), digest_size=16
    ).digest()
    return int.from_bytes(digest, "little")


class Stream:
    """A deterministic draw sequence bound to ``(seed, path)``.

    Not thread-safe: one task owns a stream at a time.  Deriving children is
    pure and does not consume draws from the parent.
    """

    __slots__ = ("seed", "path", "_bitgen")

    def __init__(self, seed: int, path: StreamPath):
        if not path.labels:
            raise ValueError("stream path must be non-empty")
        self.seed = int(seed)
        self.path = path
        self._bitgen = np.random.Philox(key=stream_key(self.seed, path))

    def child(self, tag: str, index: Index) -> "Stream":
        return Stream(self.seed, self.path.child(tag, index))

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(n)

    def uniform(self, n: int) -> np.ndarray:
        """53-bit uniforms on the open interval (0, 1)."""
        bits = self._bitgen.random_raw(int(n)) >> np.uint64(11)
        return (bits.astype(np.float64) + 0.5) * _TWO_POW_M53

    def normal(self, n: int) -> np.ndarray:
        return draw_normal(self, n)

    def below(self, bound: int, n: int) -> np.ndarray:
        """Integers in ``[0, bound)`` by ``floor(u * bound)``.

        The bias of this map is at most ``bound / 2**53`` per value.
        """
        if bound < 1:
            raise ValueError("bound must be >= 1")
        out = np.floor(self.uniform(n) * bound).astype(np.int64)
        return np.minimum(out, bound - 1)

    def chisquare(self, df: float, n: int) -> np.ndarray:
        """Chi-square deviates by inverse survival function."""
        return special.chdtri(float(df), self.uniform(n))

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n)
        _partial_shuffle(self, perm, n)
        return perm


def derive_stream(seed: int, path: StreamPath | Iterable[tuple[str, Index]]) -> Stream:
    if not isinstance(path, StreamPath):
        path = StreamPath(tuple(path))
    return Stream(seed, path)


def draw_normal(s: Stream, n: int) -> np.ndarray:
    """Standard normal deviates by inverse CDF of open-interval uniforms."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return np.empty(0)
    return special.ndtri(s.uniform(n))


def _partial_shuffle(s: Stream, arr: np.ndarray, k: int) -> None:
    # Fisher-Yates front fill: after step i, arr[:i+1] is a uniform ordered draw.
    n = arr.shape[0]
    if k == 0:
        return
    u = s.uniform(k)
    for i in range(k):
        j = i + min(int(u[i] * (n - i)), n - i - 1)
        arr[i], arr[j] = arr[j], arr[i]


def sample_without_replacement(s: Stream, n: int, k: int) -> np.ndarray:
    """Sorted array of ``k`` distinct indices drawn uniformly from ``range(n)``."""
    if n < 0 or k < 0:
        raise ValueError("n and k must be non-negative")
    if k > n:
        raise ValueError(f"cannot sample {k} items from a population of {n}")
    pool = np.arange(n)
    _partial_shuffle(s, pool, k)
    return np.sort(pool[:k])
