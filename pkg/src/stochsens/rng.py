"""Counter-based normal draws (Threefry-2x32, 20 rounds).

Draw ``idx`` of path ``i`` depends only on ``(seed, i, idx)``, so a path is the
same whether it is generated alone, in a chunk, or inside a larger ensemble.
The counter is ``(block, path)`` and the key is the seed split into two 32-bit
words. Two blocks give two 53-bit uniforms, and Box-Muller turns those into a
pair of normals: flat draw ``2j`` takes the cosine branch of pair ``j`` and
``2j+1`` the sine branch.
"""

from __future__ import annotations

import numpy as np

from ._backend import njit, select

MASK32 = 0xFFFFFFFF
_PARITY = 0x1BD11BDA
_ROT = (13, 15, 26, 6, 17, 29, 16, 24)
_TWO_M53 = 2.0 ** -53


def split_seed(seed: int) -> tuple[int, int]:
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return seed & MASK32, seed >> 32


# ---------------------------------------------------------------- numba kernel


@njit
def _rotl(x, r):
    m = np.uint64(0xFFFFFFFF)
    return ((x << np.uint64(r)) | (x >> np.uint64(32 - r))) & m


@njit
def _threefry_nb(k0, k1, c0, c1):
    m = np.uint64(0xFFFFFFFF)
    ks0 = k0
    ks1 = k1
    ks2 = (np.uint64(0x1BD11BDA) ^ k0 ^ k1) & m
    x0 = (c0 + ks0) & m
    x1 = (c1 + ks1) & m
    rot = (13, 15, 26, 6, 17, 29, 16, 24)
    for s in range(1, 6):
        base = 4 * ((s - 1) % 2)
        for i in range(4):
            x0 = (x0 + x1) & m
            x1 = _rotl(x1, rot[base + i])
            x1 = x1 ^ x0
        j = s % 3
        if j == 0:
            a, b = ks0, ks1
        elif j == 1:
            a, b = ks1, ks2
        else:
            a, b = ks2, ks0
        x0 = (x0 + a) & m
        x1 = (x1 + b + np.uint64(s)) & m
    return x0, x1


@njit
def _uniform_nb(k0, k1, block, path):
    x0, x1 = _threefry_nb(k0, k1, np.uint64(block), np.uint64(path))
    w = (x0 << np.uint64(32)) | x1
    return (float(w >> np.uint64(11)) + 0.5) * 1.1102230246251565e-16


@njit
def _normals_nb(k0, k1, path_start, n_rows, n_draws):
    out = np.empty((n_rows, n_draws))
    two_pi = 2.0 * np.pi
    for r in range(n_rows):
        path = path_start + r
        for pair in range((n_draws + 1) // 2):
            u1 = _uniform_nb(k0, k1, 2 * pair, path)
            u2 = _uniform_nb(k0, k1, 2 * pair + 1, path)
            rad = np.sqrt(-2.0 * np.log(u1))
            out[r, 2 * pair] = rad * np.cos(two_pi * u2)
            if 2 * pair + 1 < n_draws:
                out[r, 2 * pair + 1] = rad * np.sin(two_pi * u2)
    return out


def _normals_numba(seed, path_start, n_rows, n_draws):
    k0, k1 = split_seed(seed)
    return _normals_nb(np.uint64(k0), np.uint64(k1), int(path_start), int(n_rows), int(n_draws))


# ---------------------------------------------------------------- numpy kernel


def threefry2x32(key, counter):
    """Vectorised Threefry-2x32-20. ``key`` is a pair of ints, ``counter`` a pair of arrays."""
    m = np.uint64(MASK32)
    k0, k1 = np.uint64(key[0]), np.uint64(key[1])
    ks = (k0, k1, (np.uint64(_PARITY) ^ k0 ^ k1) & m)
    x0 = (np.asarray(counter[0], dtype=np.uint64) + ks[0]) & m
    x1 = (np.asarray(counter[1], dtype=np.uint64) + ks[1]) & m
    for s in range(1, 6):
        base = 4 * ((s - 1) % 2)
        for i in range(4):
            r = np.uint64(_ROT[base + i])
            x0 = (x0 + x1) & m
            x1 = ((x1 << r) | (x1 >> (np.uint64(32) - r))) & m
            x1 = x1 ^ x0
        x0 = (x0 + ks[s % 3]) & m
        x1 = (x1 + ks[(s + 1) % 3] + np.uint64(s)) & m
    return x0, x1


def _normals_numpy(seed, path_start, n_rows, n_draws):
    key = split_seed(seed)
    n_pairs = (n_draws + 1) // 2
    paths = np.arange(path_start, path_start + n_rows, dtype=np.uint64)[:, None]
    blocks = np.arange(2 * n_pairs, dtype=np.uint64)[None, :]
    x0, x1 = threefry2x32(key, (np.broadcast_to(blocks, (n_rows, 2 * n_pairs)),
                                np.broadcast_to(paths, (n_rows, 2 * n_pairs))))
    w = (x0 << np.uint64(32)) | x1
    u = ((w >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53
    u1, u2 = u[:, 0::2], u[:, 1::2]
    rad = np.sqrt(-2.0 * np.log(u1))
    out = np.empty((n_rows, 2 * n_pairs))
    out[:, 0::2] = rad * np.cos(2.0 * np.pi * u2)
    out[:, 1::2] = rad * np.sin(2.0 * np.pi * u2)
    return out[:, :n_draws]


standard_normals = select(_normals_numba, _normals_numpy)
standard_normals.__doc__ = "Standard normals of shape ``(n_rows, n_draws)`` for paths ``path_start..``."
