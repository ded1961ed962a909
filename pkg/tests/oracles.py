"""Independent reference implementations used only by the tests."""
from __future__ import annotations

from collections import deque

import networkx as nx
import numpy as np
from shapely import STRtree
from shapely.geometry import LinearRing, LineString


def shapely_clusters(loops) -> list:
    """Transitive closure of pairwise loop intersection via GEOS predicates."""
    rings = [LinearRing(l.vertices) if len(l) >= 3 else LineString(l.vertices) for l in loops]
    tree = STRtree(rings)
    g = nx.Graph()
    g.add_nodes_from(range(len(loops)))
    for i, r in enumerate(rings):
        for j in tree.query(r, predicate="intersects"):
            if j > i:
                g.add_edge(i, int(j))
    return sorted((sorted(c) for c in nx.connected_components(g)), key=lambda c: c[0])


def cell_box_distances(carpet: np.ndarray, h: float, eps: float, source) -> np.ndarray:
    """Box-hop distances from a source cell by 0-1 BFS over carpet cells.

    Moving between 4-adjacent carpet cells costs 0 inside one eps-box and 1
    across a box seam.  Returns an (n, n) array, -1 where unreachable.
    """
    n = carpet.shape[0]
    box = np.floor((np.arange(n) + 0.5) * h / eps).astype(int)
    dist = np.full(carpet.shape, -1, dtype=np.int64)
    dq = deque([(0, source)])
    best = {source: 0}
    while dq:
        d, (r, c) = dq.popleft()
        if dist[r, c] >= 0:
            continue
        dist[r, c] = d
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < n and 0 <= cc < n and carpet[rr, cc] and dist[rr, cc] < 0:
                w = int(box[rr] != box[r] or box[cc] != box[c])
                nd = d + w
                if nd < best.get((rr, cc), 1 << 60):
                    best[(rr, cc)] = nd
                    if w:
                        dq.append((nd, (rr, cc)))
                    else:
                        dq.appendleft((nd, (rr, cc)))
    return dist


def scalar_segments_intersect(p, q, r, s) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    def on(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2, o3, o4 = orient(r, s, p), orient(r, s, q), orient(p, q, r), orient(p, q, s)
    if o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4):
        return True
    return bool(
        (o1 == 0 and on(r, s, p)) or (o2 == 0 and on(r, s, q))
        or (o3 == 0 and on(p, q, r)) or (o4 == 0 and on(p, q, s))
    )
