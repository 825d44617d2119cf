"""Counter-based random streams for reproducible parallel Monte Carlo.

Every unit of work (a replicate, a particle lineage) owns a stream keyed by
``(seed, stream_id)``. Draws are addressed by a block counter, so the value of
any draw depends only on the key and the counter, never on which other streams
were consumed first. That is what makes ensembles independent of worker count
and lets the engine drop a pruned lineage without disturbing any other path.

The generator is Philox4x64-10, bit-compatible with ``numpy.random.Philox``
(checked in the test suite). It is reimplemented here, vectorized over numpy
uint64 arrays, because numpy does not expose a cheap way to re-key a bit
generator per lineage; the compiled engine core carries the same twenty lines
in C and therefore produces bit-identical streams.

Derived variates use one fixed pipeline in every backend:

* uniform: ``u = ((word >> 11) + 0.5) * 2**-53``, strictly inside (0, 1);
* normal:  ``ndtri(u)`` (inverse normal CDF, same cephes routine in C);
* exponential(rate): ``-log(u) / rate``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

# Philox4x64 round multipliers and Weyl key schedule (Random123 constants).
_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)

_MASK32 = np.uint64(0xFFFFFFFF)
_U53_SCALE = 2.0 ** -53

# splitmix64 finalizer constants, used to derive child/replicate keys.
_SM_GAMMA = 0x9E3779B97F4A7C15
_SM_M1 = 0xBF58476D1CE4E5B9
_SM_M2 = 0x94D049BB133111EB
_U64 = 1 << 64


def mix64(x: int) -> int:
    """splitmix64 finalizer: a fixed 64-bit bijective hash."""
    z = (x + _SM_GAMMA) % _U64
    z = ((z ^ (z >> 30)) * _SM_M1) % _U64
    z = ((z ^ (z >> 27)) * _SM_M2) % _U64
    return z ^ (z >> 31)


def derive_key(*parts: int) -> int:
    """Fold integers into one 64-bit key, order-sensitive."""
    acc = 0
    for p in parts:
        acc = mix64(acc ^ (p % _U64))
    return acc


def child_id(parent: int, k: int) -> int:
    """Genealogical particle id for the k-th child of ``parent``.

    Depends only on the ancestry path, so a lineage keeps its random stream
    no matter what happens elsewhere in the tree.
    """
    return mix64(parent ^ ((_SM_GAMMA * (k + 1)) % _U64))


def _mulhilo(a: np.uint64, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # 64x64 -> 128 bit product via 32-bit limbs (numpy has no umul128).
    a0 = a & _MASK32
    a1 = a >> np.uint64(32)
    b0 = b & _MASK32
    b1 = b >> np.uint64(32)
    x0 = a0 * b0
    x1 = a1 * b0
    x2 = a0 * b1
    x3 = a1 * b1
    lo = a * b
    carry = ((x0 >> np.uint64(32)) + (x1 & _MASK32) + (x2 & _MASK32)) >> np.uint64(32)
    hi = x3 + (x1 >> np.uint64(32)) + (x2 >> np.uint64(32)) + carry
    return hi, lo


def philox_blocks(key0: int, key1: int, start_block: int, nblocks: int) -> np.ndarray:
    """Raw output of Philox4x64-10 for ``nblocks`` consecutive counters.

    Counter c = (block, 0, 0, 0); returns shape (nblocks, 4) uint64. Block b
    here equals the b-th output block of ``numpy.random.Philox`` at counter b
    (numpy pre-increments, so its ``random_raw`` starts at counter 1; our
    block 1 is its first output).
    """
    c0 = (np.uint64(start_block) + np.arange(nblocks, dtype=np.uint64))
    c1 = np.zeros(nblocks, dtype=np.uint64)
    c2 = np.zeros(nblocks, dtype=np.uint64)
    c3 = np.zeros(nblocks, dtype=np.uint64)
    key0 %= _U64
    key1 %= _U64
    for r in range(10):
        k0 = np.uint64((key0 + r * int(_W0)) % _U64)
        k1 = np.uint64((key1 + r * int(_W1)) % _U64)
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
    return np.stack([c0, c1, c2, c3], axis=1)


def words_to_uniform(words: np.ndarray) -> np.ndarray:
    """Map raw 64-bit words to doubles strictly inside (0, 1)."""
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * _U53_SCALE


class RngStream:
    """One reproducible stream: ``(seed, stream_id)`` plus a block counter.

    The same (seed, stream_id) always yields the same sequence of draws,
    regardless of process, thread, or what other streams did. Not shareable
    across concurrent callers; give each worker its own stream_id.
    """

    __slots__ = ("seed", "stream_id", "counter")

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = seed % _U64
        self.stream_id = stream_id % _U64
        self.counter = counter

    def spawn(self, k: int) -> "RngStream":
        """Independent substream; stable under everything else this stream does."""
        return RngStream(self.seed, derive_key(self.stream_id, k))

    def raw(self, n: int) -> np.ndarray:
        nblocks = -(-n // 4)
        out = philox_blocks(self.seed, self.stream_id, self.counter, nblocks)
        self.counter += nblocks
        return out.reshape(-1)[:n]

    def uniform(self, n: int | None = None):
        u = words_to_uniform(self.raw(1 if n is None else n))
        return float(u[0]) if n is None else u

    def normal(self, n: int | None = None):
        u = self.uniform(1 if n is None else n)
        z = ndtri(u)
        return float(z[0]) if n is None else z

    def exponential(self, rate: float, n: int | None = None):
        u = self.uniform(1 if n is None else n)
        e = -np.log(u) / rate
        return float(e[0]) if n is None else e
