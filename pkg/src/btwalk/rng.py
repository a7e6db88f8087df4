"""Seed plumbing: per-(seed, replica) substreams and a counter-based hash for tree nodes.

Environment nodes draw their reproduction from ``splitmix64`` of a node key, so a
realization depends only on the environment seed and never on exploration order.
"""
import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_CHILD_SALT = np.uint64(0xD6E8FEB86659FD93)
_BRANCH_SALT = np.uint64(0xA0761D6478BD642F)
_TIE_SALT = np.uint64(0xE7037ED1A0B428DB)


@njit(cache=True)
def splitmix64(x):
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def to_unit(x):
    # top 53 bits -> [0, 1)
    return (x >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def child_key(parent_key, j):
    return splitmix64(parent_key ^ (np.uint64(j + 1) * _CHILD_SALT))


@njit(cache=True)
def branch_uniform(key):
    return to_unit(splitmix64(key ^ _BRANCH_SALT))


@njit(cache=True)
def tie_uniform(key):
    return to_unit(splitmix64(key ^ _TIE_SALT))


@njit(cache=True)
def seed_numba(seed):
    np.random.seed(seed)


def substream(seed, *keys):
    """Independent ``numpy.random.Generator`` for ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


def derive_u64(seed, *keys):
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.uint64(ss.generate_state(1, np.uint64)[0])


def derive_u32(rng):
    """32-bit seed for the numba-side generator, drawn from a numpy Generator."""
    return int(rng.integers(0, 2**32 - 1))
