"""Monte Carlo quantiles of the boundary diameter and metric diagnostics.

Quantile convention: the empirical p-quantile of R values is the order
statistic of rank ``ceil(p R)`` (lower midpoint for p = 1/2).
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats as sps
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.spatial.distance import directed_hausdorff

from . import ConfigError
from .carpet import CarpetMask, Disconnected, SnapError, bfs, box_graph, boundary_diameter, rasterize_carpet
from .pool import ordered_map
from .rng import derived_seed, make_rng
from .soup import NoDomainLoop, SoupConfig, sample_ensemble

__all__ = [
    "QuantileTable",
    "MetricSample",
    "ComparabilityReport",
    "HolderFit",
    "DefectStats",
    "empirical_quantile",
    "quantile_table_from_diameters",
    "replica_config",
    "replica_ensemble",
    "replica_diameters",
    "estimate_quantiles",
    "comparability_report",
    "normalized_metric_sample",
    "connected_pairs",
    "hausdorff_distance",
    "dn_distance",
    "holder_fit",
    "geodesic_midpoint_defect",
    "posdef_floor",
    "median_loglog_slope",
]

BOOTSTRAP = 200


def empirical_quantile(values, p: float) -> float:
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        raise ValueError("no values")
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    k = int(math.ceil(p * x.size - 1e-12))
    return float(x[max(k, 1) - 1])


@dataclass
class QuantileTable:
    kappa: float
    eps_list: np.ndarray
    p_list: np.ndarray
    q_hat: np.ndarray
    replica_count: int
    halfwidths: np.ndarray
    diameters: np.ndarray = field(repr=False)
    manifest_hash: str | None = None

    @property
    def m_hat(self) -> np.ndarray:
        k = np.flatnonzero(np.isclose(self.p_list, 0.5))
        if k.size == 0:
            raise KeyError("p = 1/2 not in the table")
        return self.q_hat[k[0]]

    def column(self, eps: float) -> int:
        k = np.flatnonzero(np.isclose(self.eps_list, eps, rtol=1e-9, atol=0))
        if k.size == 0:
            raise KeyError(f"eps={eps} not in the table")
        return int(k[0])

    def monotone_in_p(self) -> bool:
        return bool(np.all(np.diff(self.q_hat, axis=0) >= 0))

    def eps_violations(self, slack_steps: float = 0.0) -> list:
        """(p, eps, eps') where q(p, eps) exceeds q(p, eps') for eps < eps'.

        ``slack_steps`` tolerates a decrease of that many boxes of the
        larger eps (box-count evaluators are only monotone up to one box).
        """
        out = []
        for i, p in enumerate(self.p_list):
            for j in range(len(self.eps_list) - 1):
                a, b = self.q_hat[i, j], self.q_hat[i, j + 1]
                if a > b + slack_steps * self.eps_list[j + 1] ** 2:
                    out.append((float(p), float(self.eps_list[j]), float(self.eps_list[j + 1])))
        return out

    def rows(self) -> list:
        return [
            {
                "kappa": self.kappa, "p": float(p), "eps": float(e),
                "q_hat": float(self.q_hat[i, j]), "halfwidth": float(self.halfwidths[i, j]),
                "replicas": self.replica_count, "manifest_hash": self.manifest_hash or "",
            }
            for i, p in enumerate(self.p_list)
            for j, e in enumerate(self.eps_list)
        ]

    def to_dict(self) -> dict:
        return {
            "kappa": self.kappa,
            "eps_list": self.eps_list.tolist(),
            "p_list": self.p_list.tolist(),
            "q_hat": self.q_hat.tolist(),
            "halfwidths": self.halfwidths.tolist(),
            "replica_count": self.replica_count,
            "diameters": self.diameters.tolist(),
            "manifest_hash": self.manifest_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantileTable":
        return cls(
            d["kappa"], np.asarray(d["eps_list"], float), np.asarray(d["p_list"], float),
            np.asarray(d["q_hat"], float), int(d["replica_count"]), np.asarray(d["halfwidths"], float),
            np.asarray(d["diameters"], float), d.get("manifest_hash"),
        )


def quantile_table_from_diameters(
    kappa: float, eps_list, p_list, diameters, seed: int = 0, bootstrap: int = BOOTSTRAP,
) -> QuantileTable:
    """Quantile table from a (replicas, len(eps_list)) array of boundary diameters."""
    eps = np.asarray(eps_list, dtype=float)
    ps = np.asarray(p_list, dtype=float)
    D = np.asarray(diameters, dtype=float).reshape(-1, len(eps))
    R = D.shape[0]
    if np.any(np.diff(eps) <= 0):
        raise ConfigError("eps_list must be increasing")
    if np.any((ps <= 0) | (ps >= 1)):
        raise ConfigError("probabilities must lie in (0, 1)")
    S = np.sort(D, axis=0)
    rank = np.maximum(np.ceil(ps * R - 1e-12).astype(int), 1) - 1
    q = S[rank]
    rng = make_rng(seed, 0xB007)
    boots = np.empty((bootstrap, len(ps), len(eps)))
    for b in range(bootstrap):
        Sb = np.sort(D[rng.integers(0, R, R)], axis=0)
        boots[b] = Sb[rank]
    lo, hi = np.percentile(boots, [2.5, 97.5], axis=0)
    return QuantileTable(float(kappa), eps, ps, q, R, (hi - lo) / 2, D)


def replica_config(base: SoupConfig, index: int, attempt: int = 0) -> SoupConfig:
    """Soup config of replica ``index``, try ``attempt``: seed derived from (base.seed, index, attempt)."""
    return replace(base, seed=derived_seed(base.seed, index, attempt))


def replica_ensemble(base: SoupConfig, index: int, max_tries: int = 10):
    """(ensemble, failed tries) for replica ``index``; ensemble is None if every try failed."""
    for j in range(max_tries):
        try:
            return sample_ensemble(replica_config(base, index, j)), j
        except NoDomainLoop:
            pass
    return None, max_tries


def replica_diameters(base: SoupConfig, index: int, eps_list, n: int, net_count: int = 16, max_tries: int = 10):
    """Boundary diameters of replica ``index`` at each eps, with the number of failed tries.

    Tries whose ensemble has no domain loop or whose boundary net is not
    joined through the carpet are discarded.
    """
    failures = 0
    for j in range(max_tries):
        try:
            mask = rasterize_carpet(sample_ensemble(replica_config(base, index, j)), n)
            return [boundary_diameter(mask, e, net_count) for e in eps_list], failures
        except (NoDomainLoop, Disconnected):
            failures += 1
    return None, failures


def _replica_task(args):
    return replica_diameters(*args)


def estimate_quantiles(
    kappa: float,
    eps_list,
    p_list,
    replicas: int,
    base_config: SoupConfig,
    n: int = 256,
    net_count: int = 16,
    workers: int = 1,
) -> QuantileTable:
    """Quantiles over ``replicas`` independent ensembles of the boundary diameter."""
    if replicas < 50:
        raise ConfigError("need at least 50 replicas")
    h = 2 * base_config.domain_radius / n
    eps = [float(e) for e in eps_list]
    if min(eps) < 4 * h * (1 - 1e-9):
        raise ConfigError(f"every eps must be at least 4h = {4 * h}")
    base = replace(base_config, kappa=kappa)
    tasks = [(base, i, eps, n, net_count) for i in range(replicas)]
    results = ordered_map(_replica_task, tasks, workers)
    failures = sum(f for _, f in results)
    if failures > 10 * replicas or any(r is None for r, _ in results):
        raise RuntimeError(f"{failures} replica failures exceed the cap")
    return quantile_table_from_diameters(kappa, eps, p_list, [r for r, _ in results], seed=base.seed)


def median_loglog_slope(table: QuantileTable) -> float:
    """Descriptive slope of log m_eps against log eps."""
    return float(np.polyfit(np.log(table.eps_list), np.log(table.m_hat), 1)[0])


@dataclass
class ComparabilityReport:
    m0: float
    band: float
    ratios: dict
    spread: dict
    passed: bool
    diagnostics: list

    @property
    def max_spread(self) -> float:
        return max(self.spread.values()) if self.spread else math.inf

    def rows(self) -> list:
        return [
            {"p": p, "eps": e, "ratio": r, "spread": self.spread.get(p, math.inf), "band": self.band}
            for (p, e), r in sorted(self.ratios.items())
        ]


def comparability_report(table: QuantileTable, m0: float, band: float = 64.0) -> ComparabilityReport:
    """Ratios q(p, m0 eps)/q(p, eps) and their spread over eps, against ``band``."""
    if m0 <= 1:
        raise ConfigError("m0 must exceed 1")
    pairs = []
    for j, e in enumerate(table.eps_list):
        try:
            pairs.append((j, table.column(m0 * e)))
        except KeyError:
            pass
    if not pairs:
        raise ConfigError("table has no (eps, m0*eps) column pair")
    ratios, spread, diag = {}, {}, []
    for i, p in enumerate(table.p_list):
        rs = []
        for j, k in pairs:
            a, b = table.q_hat[i, j], table.q_hat[i, k]
            if not (np.isfinite(a) and np.isfinite(b) and a > 0 and b > 0):
                diag.append(f"degenerate quantile at p={p}, eps={table.eps_list[j]} or {table.eps_list[k]}")
                continue
            ratios[(float(p), float(table.eps_list[j]))] = float(b / a)
            rs.append(b / a)
        if rs:
            spread[float(p)] = float(max(rs) / min(rs))
    passed = not diag and bool(spread) and max(spread.values()) <= band
    return ComparabilityReport(float(m0), float(band), ratios, spread, passed, diag)


# -- metric samples ------------------------------------------------------------

@dataclass
class MetricSample:
    """Pairs (z, w) as rows of ``points`` (x_z, y_z, x_w, y_w) with normalized distances."""

    points: np.ndarray
    values: np.ndarray
    eps: float = math.nan
    m_hat: float = math.nan
    disconnected: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 4)
        self.values = np.asarray(self.values, dtype=float).ravel()
        if len(self.points) != len(self.values):
            raise ValueError("points and values differ in length")
        if np.any(self.values < 0):
            raise ValueError("normalized distances must be nonnegative")

    @property
    def separations(self) -> np.ndarray:
        return np.hypot(self.points[:, 0] - self.points[:, 2], self.points[:, 1] - self.points[:, 3])

    def __len__(self) -> int:
        return len(self.values)


def _sample_pairs(mask: CarpetMask, count: int, rng) -> np.ndarray:
    cells = np.argwhere(mask.carpet)
    if len(cells) == 0:
        raise ValueError("mask has no carpet cells")
    idx = rng.integers(0, len(cells), (count, 2))
    return np.concatenate([cells[idx[:, 0]], cells[idx[:, 1]]], axis=1)


def connected_pairs(levels, count: int, rng, max_draws: int | None = None) -> list:
    """Random point pairs joined through the carpet at every (mask, eps) level.

    Points are drawn uniformly from the carpet cells of the first mask and
    snapped into every other mask.  Returns one (count, 4) cell-pair array
    per level (rows row_z, col_z, row_w, col_w), in matching order.
    """
    first, _ = levels[0]
    cells = np.argwhere(first.carpet)
    graphs = [box_graph(m, e) for m, e in levels]
    comps = [
        connected_components(csr_matrix((np.ones(len(g.indices)), g.indices, g.indptr), shape=(g.num_nodes,) * 2))[1]
        for g in graphs
    ]
    out = [[] for _ in levels]
    draws = 0
    limit = max_draws if max_draws is not None else 50 * count
    while len(out[0]) < count and draws < limit:
        draws += 1
        i, j = rng.integers(0, len(cells), 2)
        pts = first.cell_center(cells[[i, j], 0], cells[[i, j], 1])
        try:
            snapped = [(m.snap(pts[0], e), m.snap(pts[1], e)) for m, e in levels]
        except SnapError:
            continue
        if all(c[g.label[a]] == c[g.label[b]] for (a, b), g, c in zip(snapped, graphs, comps)):
            for lst, (a, b) in zip(out, snapped):
                lst.append([a[0], a[1], b[0], b[1]])
    if len(out[0]) < count:
        raise RuntimeError(f"only {len(out[0])} connected pairs after {draws} draws")
    return [np.asarray(o, dtype=np.int64) for o in out]


def normalized_metric_sample(
    mask: CarpetMask, eps: float, m_hat: float, pair_count: int, rng, pairs=None,
) -> MetricSample:
    """Normalized box-count distances between random carpet cell pairs.

    ``pairs`` (rows of row_z, col_z, row_w, col_w) overrides the random
    draw.  Pairs not joined through the carpet are dropped and counted.
    """
    if m_hat <= 0:
        raise ConfigError("m_hat must be positive")
    graph = box_graph(mask, eps)
    P = np.asarray(pairs, dtype=np.int64).reshape(-1, 4) if pairs is not None else _sample_pairs(mask, pair_count, rng)
    src = graph.label[P[:, 0], P[:, 1]]
    dst = graph.label[P[:, 2], P[:, 3]]
    if np.any(src < 0) or np.any(dst < 0):
        raise ValueError("pair cells must be carpet cells")
    hops = np.empty(len(P), dtype=np.int64)
    for s in np.unique(src):
        sel = src == s
        dist, _ = bfs(graph, s)
        hops[sel] = dist[dst[sel]]
    ok = hops >= 0
    z = mask.cell_center(P[ok, 0], P[ok, 1])
    w = mask.cell_center(P[ok, 2], P[ok, 3])
    values = (hops[ok] + 1) * eps**2 / m_hat
    return MetricSample(np.hstack([z, w]), values, float(eps), float(m_hat), int((~ok).sum()))


def hausdorff_distance(K, L, method: str = "brute") -> float:
    """Hausdorff distance between finite point sets (rows are points)."""
    A = np.atleast_2d(np.asarray(K, dtype=float))
    B = np.atleast_2d(np.asarray(L, dtype=float))
    if A.size == 0 or B.size == 0:
        raise ValueError("Hausdorff distance needs two nonempty sets")
    if method == "kdtree":
        return float(max(directed_hausdorff(A, B)[0], directed_hausdorff(B, A)[0]))
    if method != "brute":
        raise ValueError(f"unknown method {method!r}")
    dab = np.full(len(A), np.inf)
    dba = np.full(len(B), np.inf)
    chunk = max(1, 2_000_000 // len(B))
    for i in range(0, len(A), chunk):
        D = np.sqrt(((A[i : i + chunk, None, :] - B[None, :, :]) ** 2).sum(axis=-1))
        dab[i : i + chunk] = D.min(axis=1)
        dba = np.minimum(dba, D.min(axis=0))
    return float(max(dab.max(), dba.max()))


def dn_distance(a: MetricSample, b: MetricSample) -> float:
    """d_0(a, b) + d_H(K_a, K_b) with d_0 the largest value gap over pairs within d_H."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both samples must be nonempty")
    dh = hausdorff_distance(a.points, b.points)
    tree = cKDTree(b.points)
    near = tree.query_ball_point(a.points, r=dh * (1 + 1e-12) + 1e-300)
    d0 = -math.inf
    for i, js in enumerate(near):
        if js:
            d0 = max(d0, float(np.max(np.abs(a.values[i] - b.values[js]))))
    if d0 == -math.inf:
        raise AssertionError("no pair within the Hausdorff distance")
    return d0 + dh


@dataclass
class HolderFit:
    slope: float
    ci: tuple
    bin_centers: np.ndarray
    bin_means: np.ndarray
    bin_counts: np.ndarray
    pairs: int


def holder_fit(samples, min_pairs: int = 200) -> HolderFit:
    """Slope of log normalized distance against log separation over dyadic bins.

    Bin means of (log separation, log value) are regressed with weights
    equal to the bin counts; the 95% interval uses the t distribution.
    """
    if isinstance(samples, MetricSample):
        samples = [samples]
    sep = np.concatenate([s.separations for s in samples])
    val = np.concatenate([s.values for s in samples])
    ok = (sep > 0) & (val > 0) & np.isfinite(val)
    sep, val = sep[ok], val[ok]
    if len(sep) < min_pairs:
        raise ConfigError(f"need at least {min_pairs} pairs, got {len(sep)}")
    if np.ptp(sep) == 0:
        raise ValueError("all separations are equal")
    b = np.floor(np.log2(sep)).astype(int)
    keys, inv, counts = np.unique(b, return_inverse=True, return_counts=True)
    if len(keys) < 3:
        raise ConfigError("separations must span at least 3 dyadic scales")
    lx = np.bincount(inv, np.log(sep)) / counts
    ly = np.bincount(inv, np.log(val)) / counts
    w = counts.astype(float)
    X = np.column_stack([np.ones_like(lx), lx])
    WX = X * w[:, None]
    cov = np.linalg.inv(X.T @ WX)
    beta = cov @ (WX.T @ ly)
    resid = ly - X @ beta
    dof = len(lx) - 2
    if dof > 0:
        s2 = float(np.sum(w * resid**2) / dof)
        half = float(sps.t.ppf(0.975, dof) * math.sqrt(s2 * cov[1, 1]))
    else:
        half = math.inf
    slope = float(beta[1])
    return HolderFit(slope, (slope - half, slope + half), np.exp(lx), np.exp(ly), counts, int(len(sep)))


@dataclass
class DefectStats:
    defects: np.ndarray
    excluded: int

    @property
    def median(self) -> float:
        return float(np.median(self.defects)) if self.defects.size else math.nan

    @property
    def mean(self) -> float:
        return float(np.mean(self.defects)) if self.defects.size else math.nan

    def summary(self) -> dict:
        q = np.percentile(self.defects, [10, 90]) if self.defects.size else [math.nan] * 2
        return {"count": int(self.defects.size), "excluded": self.excluded, "median": self.median,
                "mean": self.mean, "q10": float(q[0]), "q90": float(q[1])}


def geodesic_midpoint_defect(mask: CarpetMask, eps: float, m_hat: float, pairs) -> DefectStats:
    """Relative midpoint defect of carpet cell pairs (rows row_z, col_z, row_w, col_w).

    With hop distances d(., .) on the box graph and d = d(z, w), the defect
    is ``min_u max(|d(z,u) - d/2|, |d(u,w) - d/2|) / d`` over nodes u.  The
    ratio is scale free, so the normalization by ``m_hat`` cancels.  Pairs
    in the same box (d = 0) are excluded and counted.
    """
    if m_hat <= 0:
        raise ConfigError("m_hat must be positive")
    graph = box_graph(mask, eps)
    P = np.asarray(pairs, dtype=np.int64).reshape(-1, 4)
    out, excluded = [], 0
    for r0, c0, r1, c1 in P:
        a, b = graph.label[r0, c0], graph.label[r1, c1]
        da, _ = bfs(graph, a)
        d = da[b]
        if d < 0:
            raise Disconnected("pairs must be connected")
        if d == 0:
            excluded += 1
            continue
        db, _ = bfs(graph, b)
        ok = (da >= 0) & (db >= 0)
        gap = np.maximum(np.abs(da[ok] - d / 2), np.abs(db[ok] - d / 2))
        out.append(float(gap.min()) / d)
    return DefectStats(np.asarray(out), excluded)


def posdef_floor(samples, r: float) -> float:
    """Smallest normalized distance among pairs at separation at least r."""
    if isinstance(samples, MetricSample):
        samples = [samples]
    sep = np.concatenate([s.separations for s in samples])
    val = np.concatenate([s.values for s in samples])
    sel = sep >= r
    if not sel.any():
        raise ConfigError(f"no pairs at separation >= {r}")
    return float(val[sel].min())


def write_rows(rows: list, fmt: str = "csv") -> str:
    """Serialize report rows as CSV (header from the first row) or JSON."""
    if fmt == "json":
        return json.dumps(rows, indent=1, sort_keys=True, default=float) + "\n"
    if fmt != "csv":
        raise ConfigError(f"unknown format {fmt!r}")
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})
    return buf.getvalue()
