"""Fast property suites behind ``clecarpet selftest``.

Each check returns ``(name, passed, detail)``; the suites use small sizes
so the whole run takes well under a minute.
"""
from __future__ import annotations

import json
import math

import numpy as np

from .carpet import CARPET, HOLE, CarpetMask, bfs, box_graph
from .config import dump_config, parse_config
from .geometry import segments_intersect
from .levy import params_from_kappa, positivity_estimate, sample_path_with_jumps
from .manifest import RunManifest
from .rng import make_rng
from .soup import cluster_loops, sample_brownian_loop
from .stats import empirical_quantile, hausdorff_distance, holder_fit, MetricSample

__all__ = ["run_selftest", "brute_force_clusters"]


def _scalar_intersect(p, q, r, s) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    def within(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2, o3, o4 = orient(r, s, p), orient(r, s, q), orient(p, q, r), orient(p, q, s)
    if o1 * o2 < 0 and o3 * o4 < 0:
        return True
    return (
        (o1 == 0 and within(r, s, p)) or (o2 == 0 and within(r, s, q))
        or (o3 == 0 and within(p, q, r)) or (o4 == 0 and within(p, q, s))
    )


def brute_force_clusters(loops: list) -> list:
    """Transitive closure of pairwise loop intersection, all segment pairs checked."""
    n = len(loops)
    adj = [[] for _ in range(n)]
    for i in range(n):
        vi = loops[i].vertices
        ai, bi = vi, np.roll(vi, -1, axis=0)
        for j in range(i + 1, n):
            vj = loops[j].vertices
            aj, bj = vj, np.roll(vj, -1, axis=0)
            # every segment of i against every segment of j
            P1 = np.repeat(ai, len(vj), axis=0)
            P2 = np.repeat(bi, len(vj), axis=0)
            Q1 = np.tile(aj, (len(vi), 1))
            Q2 = np.tile(bj, (len(vi), 1))
            if segments_intersect(P1, P2, Q1, Q2).any():
                adj[i].append(j)
                adj[j].append(i)
    seen = [False] * n
    groups = []
    for s in range(n):
        if seen[s]:
            continue
        stack, comp = [s], []
        seen[s] = True
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        groups.append(sorted(comp))
    return sorted(groups, key=lambda g: g[0])


def _check_params():
    rng = make_rng(11)
    worst = 0.0
    for k in rng.uniform(8 / 3 + 1e-6, 4 - 1e-6, 100):
        p = params_from_kappa(k)
        worst = max(worst, abs((1 + p.skew_beta) / (1 - p.skew_beta) - p.u))
    return "levy_params_identity", worst <= 1e-12, f"max deviation {worst:.2e}"


def _check_positivity(seed):
    p = params_from_kappa(3.0)
    est, se = positivity_estimate(p, 200_000, make_rng(seed, 21))
    ok = abs(est - p.positivity) <= 3 * math.sqrt(p.positivity * (1 - p.positivity) / 200_000)
    return "levy_positivity", ok, f"{est:.4f} vs {p.positivity}"


def _check_jump_counts(seed):
    p = params_from_kappa(3.0)
    s = 0.2
    counts = np.array([
        np.count_nonzero(sample_path_with_jumps(p, 1.0, 0.2**p.alpha / 10, 0.2, make_rng(seed, 22, i)).jump_sizes >= s)
        for i in range(400)
    ])
    mu = p.jump_rate(s)
    ok = abs(counts.mean() - mu) <= 3 * math.sqrt(mu / len(counts)) and abs(counts.var(ddof=1) / mu - 1) <= 0.3
    return "levy_jump_counts", ok, f"mean {counts.mean():.3f} var {counts.var(ddof=1):.3f} vs {mu:.3f}"


def _check_segments(seed):
    rng = make_rng(seed, 23)
    pts = rng.integers(0, 5, (2000, 4, 2)).astype(float)
    fast = segments_intersect(pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3])
    slow = np.array([_scalar_intersect(*(tuple(map(float, v)) for v in q)) for q in pts])
    return "segment_intersection", bool(np.array_equal(fast, slow)), f"{int((fast != slow).sum())} mismatches"


def _check_clusters(seed):
    rng = make_rng(seed, 24)
    loops = [sample_brownian_loop(rng.uniform(-1, 1, 2), rng.uniform(0.001, 0.05), 16, rng) for _ in range(60)]
    ok = cluster_loops(loops) == brute_force_clusters(loops)
    return "clustering_oracle", ok, f"{len(loops)} loops"


def _check_metric(seed):
    rng = make_rng(seed, 25)
    cells = np.full((256, 256), CARPET, dtype=np.uint8)
    cells[rng.random((256, 256)) < 0.3] = HOLE
    mask = CarpetMask(cells, 1 / 256, 0.0, 0.0)
    g = box_graph(mask, 4 / 256)
    nodes = rng.integers(0, g.num_nodes, 8)
    D = np.array([bfs(g, a)[0] for a in nodes])
    sub = D[:, nodes]
    sym = np.array_equal(sub, sub.T)
    tri = True
    for i in range(len(nodes)):
        for j in range(len(nodes)):
            for k in range(len(nodes)):
                a, b, c = sub[i, j], sub[j, k], sub[i, k]
                if min(a, b, c) >= 0 and c > a + b:
                    tri = False
    return "graph_metric_axioms", sym and tri, f"{g.num_nodes} nodes"


def _check_config():
    cfg = parse_config("")
    again = parse_config(dump_config(cfg))
    man = RunManifest(0, "selftest", cfg.to_dict(), [], timestamp="1970-01-01T00:00:00Z")
    same = RunManifest.from_dict(json.loads(man.to_json())).hash == man.hash
    return "config_roundtrip", again.to_dict() == cfg.to_dict() and same, "TOML and manifest"


def _check_quantiles():
    q = empirical_quantile(np.arange(1, 101), 0.5)
    return "quantile_convention", q == 50, f"median of 1..100 = {q}"


def _check_hausdorff(seed):
    rng = make_rng(seed, 26)
    A, B = rng.random((200, 4)), rng.random((150, 4))
    a, b = hausdorff_distance(A, B), hausdorff_distance(A, B, method="kdtree")
    return "hausdorff_crosscheck", abs(a - b) <= 1e-12, f"{a:.6f} vs {b:.6f}"


def _check_holder(seed):
    rng = make_rng(seed, 27)
    z = rng.random((2000, 2))
    w = z + rng.normal(size=(2000, 2)) * np.exp(rng.uniform(-6, 0, (2000, 1)))
    sep = np.hypot(*(z - w).T)
    fit = holder_fit(MetricSample(np.hstack([z, w]), sep**0.5))
    return "holder_planted", abs(fit.slope - 0.5) <= 0.01, f"slope {fit.slope:.4f}"


def run_selftest(seed: int = 0) -> list:
    checks = [
        _check_params, lambda: _check_positivity(seed), lambda: _check_jump_counts(seed),
        lambda: _check_segments(seed), lambda: _check_clusters(seed), lambda: _check_metric(seed),
        _check_config, _check_quantiles, lambda: _check_hausdorff(seed), lambda: _check_holder(seed),
    ]
    out = []
    for chk in checks:
        try:
            out.append(chk())
        except Exception as exc:  # a crashing check is a failed check
            out.append((getattr(chk, "__name__", "check"), False, f"error: {exc}"))
    return out
