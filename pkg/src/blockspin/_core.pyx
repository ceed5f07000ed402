# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled Redelmeier growth over at most 64 nodes."""

from libc.stdint cimport uint64_t


cdef inline int _lowbit(uint64_t x) noexcept:
    cdef int i = 0
    while not (x >> i) & 1:
        i += 1
    return i


cdef void _rec(
    uint64_t current,
    int size,
    uint64_t untried,
    uint64_t seen,
    const uint64_t[:] neighbors,
    const long[:] weights,
    int cap,
    list out,
):
    cdef uint64_t low, fresh
    cdef int v
    out.append(current)
    while untried:
        low = untried & (~untried + 1)
        untried ^= low
        v = _lowbit(low)
        if size + weights[v] > cap:
            continue
        fresh = neighbors[v] & ~seen
        _rec(current | low, size + weights[v], untried | fresh, seen | fresh, neighbors, weights, cap, out)


def grow_connected(neighbors, weights, int cap):
    """Every connected node set of total weight at most ``cap``, each exactly once."""
    import numpy as np

    cdef Py_ssize_t n = len(neighbors)
    if n > 64:
        raise OverflowError("compiled growth handles at most 64 nodes")
    cdef uint64_t[:] nb = np.asarray([int(m) for m in neighbors], dtype=np.uint64)
    cdef long[:] w = np.asarray(weights, dtype=np.int_)
    cdef list out = []
    cdef int root
    cdef uint64_t below, start_nb, one = 1
    for root in range(n):
        if w[root] > cap:
            continue
        below = (one << root) - 1
        start_nb = nb[root] & ~below & ~(one << root)
        _rec(one << root, w[root], start_nb, below | (one << root) | start_nb, nb, w, cap, out)
    return [int(m) for m in out]
