"""Pure-Python shortest-augmenting-path assignment (Jonker-Volgenant style).

Used when the compiled ``langdet._hungarian`` extension is unavailable.
"""
import math


def solve(cost, out):
    """Fill ``out[i]`` with the column assigned to row ``i``. Requires n <= m.

    ``cost`` is any 2-D indexable of floats; potentials keep reduced costs
    non-negative so each row insertion is one Dijkstra-like sweep.
    """
    n = len(cost)
    m = len(cost[0]) if n else 0
    rows = [list(map(float, r)) for r in cost]
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [math.inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = rows[i0 - 1]
            ui0 = u[i0]
            delta = math.inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
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
        if p[j]:
            out[p[j] - 1] = j - 1
