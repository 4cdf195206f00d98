# cython: language_level=3
"""Compiled shortest-augmenting-path Hungarian solver (see _assign_py.py)."""

import numpy as np

from libc.math cimport INFINITY


def min_cost_square(double[:, ::1] cost):
    cdef Py_ssize_t n = cost.shape[0]
    if cost.shape[1] != n:
        raise ValueError("cost matrix must be square")
    u_arr = np.zeros(n + 1, dtype=np.float64)
    v_arr = np.zeros(n + 1, dtype=np.float64)
    minv_arr = np.empty(n + 1, dtype=np.float64)
    p_arr = np.zeros(n + 1, dtype=np.intp)
    way_arr = np.zeros(n + 1, dtype=np.intp)
    used_arr = np.zeros(n + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    cdef double[::1] minv = minv_arr
    cdef Py_ssize_t[::1] p = p_arr
    cdef Py_ssize_t[::1] way = way_arr
    cdef unsigned char[::1] used = used_arr
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur, ui0

    with nogil:
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            for j in range(n + 1):
                minv[j] = INFINITY
                used[j] = 0
            while True:
                used[j0] = 1
                i0 = p[j0]
                ui0 = u[i0]
                delta = INFINITY
                j1 = 0
                for j in range(1, n + 1):
                    if not used[j]:
                        cur = cost[i0 - 1, j - 1] - ui0 - v[j]
                        if cur < minv[j]:
                            minv[j] = cur
                            way[j] = j0
                        if minv[j] < delta:
                            delta = minv[j]
                            j1 = j
                for j in range(n + 1):
                    if used[j]:
                        u[p[j]] += delta
                        v[j] -= delta
                    else:
                        minv[j] -= delta
                j0 = j1
                if p[j0] == 0:
                    break
            while True:
                j1 = way[j0]
                p[j0] = p[j1]
                j0 = j1
                if j0 == 0:
                    break

    cols = [0] * n
    for j in range(1, n + 1):
        cols[p[j] - 1] = j - 1
    return cols
