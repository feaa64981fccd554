"""Counter-based random streams.

Every variate is a pure function of ``(key, counter)``, so a path's noise at a
given step does not depend on how many other paths are simulated, in which
order, or on which worker.  The generator is Philox4x32-10 (Salmon et al.,
SC'11), evaluated vectorised in numpy with 64-bit intermediate products.

Normals come from Box-Muller on pairs of 53-bit uniforms: one Philox block
(four 32-bit words) yields two uniforms and therefore two normals.
"""

from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)

# stream tags keep unrelated consumers of one seed apart
STREAM_PATHS = 0
STREAM_BATCH = 1
STREAM_BOUNDARY = 2
STREAM_METRICS = 3
STREAM_INIT = 4
STREAM_BRIDGE = 5


def philox4x32(counter, key, rounds: int = 10):
    """Evaluate Philox4x32 on a batch of counters.

    ``counter`` is an array of shape (..., 4) of 32-bit words, ``key`` a pair of
    32-bit words (broadcastable to (..., 2)).  Returns uint64 array (..., 4)
    holding the 32-bit outputs.
    """
    c = np.asarray(counter, dtype=np.uint64) & _MASK32
    k = np.asarray(key, dtype=np.uint64) & _MASK32
    c0, c1, c2, c3 = (c[..., j].copy() for j in range(4))
    k0 = np.broadcast_to(k[..., 0], c0.shape).copy()
    k1 = np.broadcast_to(k[..., 1], c0.shape).copy()
    for r in range(rounds):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _S32, p0 & _MASK32
        hi1, lo1 = p1 >> _S32, p1 & _MASK32
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
        if r != rounds - 1:
            k0 = (k0 + _W0) & _MASK32
            k1 = (k1 + _W1) & _MASK32
    return np.stack([c0, c1, c2, c3], axis=-1)


def seed_key(seed: int) -> np.ndarray:
    """Split a non-negative integer seed (< 2**64) into a Philox key."""
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must lie in [0, 2**64), got {seed}")
    return np.array([seed & 0xFFFFFFFF, seed >> 32], dtype=np.uint64)


def uniforms(seed: int, stream: int, a, b, n: int) -> np.ndarray:
    """Uniform(0, 1] doubles indexed by (stream, a[j], b[j], slot 0..n-1).

    ``a`` and ``b`` are integer arrays of equal shape S (e.g. path index and
    step).  Result has shape S + (n,).  Values are in (0, 1], so ``log`` is
    always finite.
    """
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    a, b = np.broadcast_arrays(a, b)
    nblk = (n + 1) // 2
    blk = np.arange(nblk, dtype=np.uint64)
    shape = a.shape + (nblk,)
    ctr = np.empty(shape + (4,), dtype=np.uint64)
    ctr[..., 0] = a[..., None]
    ctr[..., 1] = b[..., None]
    ctr[..., 2] = blk
    ctr[..., 3] = np.uint64(stream)
    out = philox4x32(ctr, seed_key(seed))
    hi = (out[..., 0::2] << _S32) | out[..., 1::2]  # two 64-bit words per block
    u = ((hi >> np.uint64(11)).astype(np.float64) + 1.0) * (1.0 / 9007199254740992.0)
    return u.reshape(a.shape + (2 * nblk,))[..., :n]


def normals(seed: int, stream: int, a, b, n: int) -> np.ndarray:
    """Standard normals indexed like :func:`uniforms`; shape S + (n,)."""
    m = 2 * ((n + 1) // 2)
    u = uniforms(seed, stream, a, b, m)
    u1, u2 = u[..., 0::2], u[..., 1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(u.shape, dtype=np.float64)
    z[..., 0::2] = r * np.cos(theta)
    z[..., 1::2] = r * np.sin(theta)
    return z[..., :n]


def generator(seed: int, stream: int, *words: int) -> np.random.Generator:
    """A numpy Generator keyed deterministically by (seed, stream, words).

    Used for the small, sequential draws (mini-batch indices, boundary
    samples, initial weights) where per-item counter addressing buys nothing.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream), *map(int, words)])))
