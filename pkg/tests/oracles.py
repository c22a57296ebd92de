"""Slow, obviously-correct reference implementations used as test oracles."""

from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np


def collapse(path, blank=0):
    out, prev = [], None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def brute_ctc_nll(log_probs: np.ndarray, target) -> float:
    """-log of the summed probability of every alignment that collapses to ``target``."""
    T, V = log_probs.shape
    probs = np.exp(log_probs)
    target = tuple(target)
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if collapse(path) == target:
            total += float(np.prod(probs[np.arange(T), path]))
    return -np.log(total)


def brute_edit_distance(a, b) -> int:
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def random_log_probs(rng, T, V):
    x = rng.standard_normal((T, V))
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))
