"""One-to-one assignment over weighted bipartite edges."""
from __future__ import annotations

from typing import Dict, Hashable, Iterable, List, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

Edge = Tuple[Hashable, Hashable, float]


def max_weight_matching(edges: Sequence[Edge]) -> List[Edge]:
    """Maximum-total-weight matching restricted to the given edges.

    Missing pairs are not allowed to match. Only positive-weight edges can be
    selected; zero/negative edges never increase the total.
    """
    if not edges:
        return []
    left = sorted({e[0] for e in edges}, key=repr)
    right = sorted({e[1] for e in edges}, key=repr)
    li = {v: i for i, v in enumerate(left)}
    ri = {v: i for i, v in enumerate(right)}
    w = np.zeros((len(left), len(right)))
    present = np.zeros_like(w, dtype=bool)
    for a, b, s in edges:
        i, j = li[a], ri[b]
        if present[i, j]:
            raise ValueError(f"duplicate edge {a!r} -> {b!r}")
        w[i, j] = s
        present[i, j] = True
    rows, cols = linear_sum_assignment(w, maximize=True)
    return [
        (left[i], right[j], float(w[i, j]))
        for i, j in zip(rows, cols)
        if present[i, j] and w[i, j] > 0
    ]


def greedy_matching(edges: Iterable[Edge]) -> List[Edge]:
    """Accept edges in the given order whenever both endpoints are still free."""
    used_l, used_r = set(), set()
    out = []
    for a, b, s in edges:
        if a in used_l or b in used_r:
            continue
        used_l.add(a)
        used_r.add(b)
        out.append((a, b, s))
    return out


def total_weight(matching: Iterable[Edge]) -> float:
    return float(sum(e[2] for e in matching))
