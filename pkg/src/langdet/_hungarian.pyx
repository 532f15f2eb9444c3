# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled shortest-augmenting-path solver for rectangular assignment.

Mirrors ``langdet._hungarian_py.solve`` step for step so both routes return
identical assignments, including tie-breaks.
"""
from libc.math cimport INFINITY
from libc.stdlib cimport free, malloc


def solve(const double[:, ::1] cost, Py_ssize_t[::1] out):
    """Fill ``out[i]`` with the column assigned to row ``i``. Requires n <= m."""
    cdef Py_ssize_t n = cost.shape[0]
    cdef Py_ssize_t m = cost.shape[1]
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur
    cdef double *u = <double *> malloc((n + 1) * sizeof(double))
    cdef double *v = <double *> malloc((m + 1) * sizeof(double))
    cdef double *minv = <double *> malloc((m + 1) * sizeof(double))
    cdef Py_ssize_t *p = <Py_ssize_t *> malloc((m + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t *way = <Py_ssize_t *> malloc((m + 1) * sizeof(Py_ssize_t))
    cdef char *used = <char *> malloc((m + 1) * sizeof(char))
    if not (u and v and minv and p and way and used):
        free(u); free(v); free(minv); free(p); free(way); free(used)
        raise MemoryError()
    try:
        for i in range(n + 1):
            u[i] = 0.0
        for j in range(m + 1):
            v[j] = 0.0
            p[j] = 0
            way[j] = 0
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            for j in range(m + 1):
                minv[j] = INFINITY
                used[j] = 0
            while True:
                used[j0] = 1
                i0 = p[j0]
                delta = INFINITY
                j1 = 0
                for j in range(1, m + 1):
                    if not used[j]:
                        cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                        if cur < minv[j]:
                            minv[j] = cur
                            way[j] = j0
                        if minv[j] < delta:
                            delta = minv[j]
                            j1 = j
                for j in range(m + 1):
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
        for j in range(1, m + 1):
            if p[j] != 0:
                out[p[j] - 1] = j - 1
    finally:
        free(u); free(v); free(minv); free(p); free(way); free(used)
