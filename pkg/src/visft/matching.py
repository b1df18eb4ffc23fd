"""Minimum-cost bipartite assignment (Kuhn-Munkres) for rectangular cost matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Assignment:
    """Matched ``(query, target)`` pairs, sorted by query index."""

    pairs: tuple[tuple[int, int], ...]

    @property
    def queries(self) -> list[int]:
        return [q for q, _ in self.pairs]

    @property
    def targets(self) -> list[int]:
        return [t for _, t in self.pairs]

    def total(self, cost) -> float:
        cost = np.asarray(cost, dtype=np.float64)
        return math.fsum(cost[q, t] for q, t in self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)


def hungarian_match(cost) -> Assignment:
    """Assign every target (column) to a distinct query (row) at minimum total cost.

    ``cost`` has shape ``[num_queries, num_targets]`` with
    ``num_targets <= num_queries``. Among optimal assignments the one whose
    query-sorted pair list is lexicographically smallest is returned.

    Ties are resolved exactly by running the shortest-augmenting-path
    algorithm over lexicographic (cost, tiebreak) values, where cell
    ``(q, t)`` carries the integer tiebreak ``-2**(R - (q*n + t))``.
    Minimizing the tiebreak sum selects the smallest sorted cell sequence
    because each weight dominates the sum of all later ones.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost must be a 2-D matrix, got shape {c.shape}")
    m, n = c.shape  # queries, targets
    if n == 0:
        return Assignment(())
    if n > m:
        raise ValueError(f"num_targets ({n}) exceeds num_queries ({m})")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix contains non-finite entries")

    R = m * n
    # Rows of the working problem are targets, columns are queries (1-based).
    a = [[(0.0, 0)] * (m + 1)] + [
        [(0.0, 0)] + [(float(c[q, t]), -(1 << (R - (q * n + t)))) for q in range(m)] for t in range(n)
    ]
    inf = (math.inf, 0)
    u = [(0.0, 0)] * (n + 1)
    v = [(0.0, 0)] * (m + 1)
    p = [0] * (m + 1)  # p[j] = row matched to column j
    way = [0] * (m + 1)

    def sub(x, y):
        return (x[0] - y[0], x[1] - y[1])

    def add(x, y):
        return (x[0] + y[0], x[1] + y[1])

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            row = a[i0]
            ui0 = u[i0]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = sub(sub(row[j], ui0), v[j])
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] = add(u[p[j]], delta)
                    v[j] = sub(v[j], delta)
                else:
                    minv[j] = sub(minv[j], delta)
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break

    pairs = sorted((j - 1, p[j] - 1) for j in range(1, m + 1) if p[j] != 0)
    return Assignment(tuple(pairs))
