"""Simple CLE sampling through the Brownian loop soup.

The soup in the disk of radius ``domain_radius`` is a Poisson process of
Brownian loops with intensity ``c`` times the loop measure
``dt / (2 pi t^2) dA(root)``, restricted to loops of time length at least
``min_duration`` and to loops that stay inside the disk.  Loops are
clustered by polyline intersection; the outer boundaries of the outermost
clusters are the CLE loops.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import ndimage

from . import ConfigError
from .geometry import Grid, Loop, dilate4, erode4, largest_component, polygon_mask, segments_intersect, trace_outer_contour
from .rng import make_rng

__all__ = [
    "SoupConfig",
    "LoopEnsemble",
    "NoDomainLoop",
    "DisjointSet",
    "default_intensity",
    "expected_loop_count",
    "sample_brownian_loop",
    "sample_loop_soup",
    "cluster_loops",
    "outermost_boundaries",
    "sample_ensemble",
    "write_ensemble_text",
    "read_ensemble_text",
    "write_ensemble_binary",
    "read_ensemble_binary",
    "RESTRICTION_NOTE",
]

RESTRICTION_NOTE = (
    "inner CLE reuses soup loops lying inside the domain loop (restriction property) "
    "instead of an independent CLE sampled given the domain loop"
)
CUTOFF_NOTE = "loops shorter than min_duration are omitted; carpet is biased below sqrt(min_duration)"


class NoDomainLoop(RuntimeError):
    """No outermost cluster boundary surrounds the origin."""


def default_intensity(kappa: float) -> float:
    """Loop-soup intensity c(kappa) = (3 kappa - 8)(6 - kappa) / (2 kappa)."""
    return (3 * kappa - 8) * (6 - kappa) / (2 * kappa)


@dataclass
class SoupConfig:
    kappa: float = 3.0
    intensity: float | None = None
    min_duration: float = 1e-4
    bridge_steps: int = 8
    domain_radius: float = 1.0
    seed: int = 0
    raster_n: int = 512
    max_steps: int = 4096
    max_attempts: int = 50
    min_domain_fraction: float = 0.02

    def __post_init__(self):
        if not 8 / 3 < self.kappa < 4:
            raise ConfigError(f"kappa must lie in (8/3, 4), got {self.kappa}")
        if self.min_duration <= 0:
            raise ConfigError("min_duration must be positive (the loop measure is infinite)")
        if self.bridge_steps < 8:
            raise ConfigError("bridge_steps must be at least 8")
        if self.domain_radius <= 0:
            raise ConfigError("domain_radius must be positive")
        if self.raster_n < 256:
            raise ConfigError("raster_n must be at least 256")
        if self.intensity is not None and self.intensity < 0:
            raise ConfigError("intensity must be nonnegative")

    @property
    def intensity_overridden(self) -> bool:
        return self.intensity is not None and not math.isclose(self.intensity, default_intensity(self.kappa))

    @property
    def c(self) -> float:
        return default_intensity(self.kappa) if self.intensity is None else float(self.intensity)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["intensity"] = self.c
        d["intensity_overridden"] = self.intensity_overridden
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SoupConfig":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        if not d.get("intensity_overridden", True):
            kw["intensity"] = None
        return cls(**kw)


@dataclass(eq=False)
class LoopEnsemble:
    cle_loops: list
    domain_loop: Loop | None
    radius: float
    kappa: float = float("nan")
    intensity: float = float("nan")
    seed: int = 0
    manifest: object = None
    notes: list = field(default_factory=list)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LoopEnsemble):
            return NotImplemented
        same_domain = (self.domain_loop is None and other.domain_loop is None) or (
            self.domain_loop is not None and self.domain_loop == other.domain_loop
        )
        return (
            same_domain
            and len(self.cle_loops) == len(other.cle_loops)
            and all(a == b for a, b in zip(self.cle_loops, other.cle_loops))
            and self.radius == other.radius
        )

    def grid(self, n: int) -> Grid:
        return Grid.square((0.0, 0.0), 2 * self.radius, n)


def sample_brownian_loop(root, duration: float, steps: int, rng: np.random.Generator) -> Loop:
    """Planar Brownian bridge of time length ``duration`` from ``root`` to itself.

    Vertex k is the bridge at time ``k * duration / steps``; vertex 0 is the
    root and the implicit closing vertex returns to it exactly.
    """
    if steps < 8:
        raise ConfigError(f"steps must be at least 8, got {steps}")
    if duration <= 0:
        raise ConfigError("duration must be positive")
    inc = rng.standard_normal((steps, 2)) * math.sqrt(duration / steps)
    w = np.cumsum(inc, axis=0)
    k = np.arange(steps)[:, None]
    bridge = np.vstack([np.zeros((1, 2)), w[:-1]]) - (k / steps) * w[-1]
    bridge[0] = 0.0
    return Loop(np.asarray(root, dtype=float) + bridge)


def expected_loop_count(config: SoupConfig) -> float:
    """Mean number of soup loops rooted in the disk with time length >= min_duration.

    c * area * int_{t0}^inf dt / (2 pi t^2) = c R^2 / (2 t0).
    """
    return config.c * config.domain_radius**2 / (2 * config.min_duration)


def _draw_soup(config: SoupConfig, rng: np.random.Generator) -> tuple[list, int]:
    R = config.domain_radius
    t0 = config.min_duration
    n = int(rng.poisson(expected_loop_count(config)))
    r = R * np.sqrt(rng.random(n))
    th = 2 * np.pi * rng.random(n)
    roots = np.column_stack([r * np.cos(th), r * np.sin(th)])
    # t^-2 density on [t0, inf): inverse transform t = t0 / U, U in (0, 1]
    durations = t0 / (1.0 - rng.random(n))
    kept = []
    for root, t in zip(roots, durations):
        steps = int(min(config.max_steps, config.bridge_steps * math.ceil(t / t0)))
        loop = sample_brownian_loop(root, t, steps, rng)
        if np.einsum("ij,ij->i", loop.vertices, loop.vertices).max() < R * R:
            kept.append(loop)
    return kept, n


def sample_loop_soup(config: SoupConfig, rng: np.random.Generator | None = None) -> list:
    """Loops of the truncated soup that lie inside the domain disk."""
    if rng is None:
        rng = make_rng(config.seed)
    return _draw_soup(config, rng)[0]


class DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, i: int) -> int:
        parent = self.parent
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(self, i: int, j: int) -> bool:
        a, b = self.find(i), self.find(j)
        if a == b:
            return False
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        return True

    def groups(self) -> list:
        out: dict[int, list] = {}
        for i in range(len(self.parent)):
            out.setdefault(self.find(i), []).append(i)
        return sorted(out.values(), key=lambda g: g[0])


_PAIR_BATCH = 4_000_000


def _candidate_pairs(keys_sorted: np.ndarray):
    """Yield index pairs (a, b), a < b, of equal keys in a sorted key array."""
    m = keys_sorted.size
    if m < 2:
        return
    starts = np.flatnonzero(np.r_[True, keys_sorted[1:] != keys_sorted[:-1]])
    ends = np.r_[starts[1:], m]
    sizes = ends - starts
    multi = sizes > 1
    starts, ends, sizes = starts[multi], ends[multi], sizes[multi]
    npairs = sizes * (sizes - 1) // 2
    lo = 0
    while lo < len(starts):
        hi = lo + max(1, int(np.searchsorted(np.cumsum(npairs[lo:]), _PAIR_BATCH)))
        s, e = starts[lo:hi], ends[lo:hi]
        pos = np.concatenate([np.arange(a, b) for a, b in zip(s, e)])
        end = np.repeat(e, e - s)
        cnt = end - pos - 1
        first = np.repeat(pos, cnt)
        offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        yield first, first + 1 + offs
        lo = hi


def cluster_loops(loops: list, cell_size: float | None = None) -> list:
    """Partition loop indices into clusters of chained intersecting loops.

    Candidate segment pairs come from a uniform spatial hash of segment
    bounding boxes; intersecting pairs are merged with a union-find.
    Clusters are returned as sorted index lists, ordered by smallest index.
    """
    n = len(loops)
    if n == 0:
        return []
    counts = np.array([len(l) for l in loops])
    A = np.concatenate([l.vertices for l in loops])
    B = np.concatenate([np.roll(l.vertices, -1, axis=0) for l in loops])
    lid = np.repeat(np.arange(n), counts)
    if cell_size is None:
        cell_size = 2.0 * float(np.median(np.hypot(*(B - A).T)))
        span = float(np.ptp(np.vstack([A, B]), axis=0).max())
        cell_size = max(cell_size, span / 4096, 1e-12)
    lo = np.floor(np.minimum(A, B) / cell_size).astype(np.int64)
    hi = np.floor(np.maximum(A, B) / cell_size).astype(np.int64)
    nx = hi[:, 0] - lo[:, 0] + 1
    ny = hi[:, 1] - lo[:, 1] + 1
    k = nx * ny
    seg = np.repeat(np.arange(len(A)), k)
    offs = np.arange(k.sum()) - np.repeat(np.cumsum(k) - k, k)
    cx = lo[seg, 0] + offs % nx[seg]
    cy = lo[seg, 1] + offs // nx[seg]
    width = int(cy.max() - cy.min()) + 1
    key = (cx - cx.min()) * width + (cy - cy.min())
    order = np.argsort(key, kind="stable")
    key, seg = key[order], seg[order]

    dsu = DisjointSet(n)
    for ia, ib in _candidate_pairs(key):
        sa, sb = seg[ia], seg[ib]
        diff = lid[sa] != lid[sb]
        sa, sb = sa[diff], sb[diff]
        if sa.size == 0:
            continue
        hit = segments_intersect(A[sa], B[sa], A[sb], B[sb])
        la, lb = lid[sa[hit]], lid[sb[hit]]
        if la.size == 0:
            continue
        pairs = np.unique(np.minimum(la, lb) * n + np.maximum(la, lb))
        for p in pairs.tolist():
            dsu.union(p // n, p % n)
    return dsu.groups()


def _trace_cells(loops: list, grid: Grid):
    """(loop index, flat cell index) of every grid cell touched by each loop trace."""
    if not loops:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    A = np.concatenate([l.vertices for l in loops])
    B = np.concatenate([np.roll(l.vertices, -1, axis=0) for l in loops])
    seg_owner = np.repeat(np.arange(len(loops)), [len(l) for l in loops])
    k = np.maximum(np.ceil(np.hypot(*(B - A).T) / (grid.h / 2)).astype(np.int64), 1)
    idx = np.repeat(np.arange(len(A)), k)
    frac = (np.arange(k.sum()) - np.repeat(np.cumsum(k) - k, k)) / np.repeat(k, k)
    owner = seg_owner[idx]
    row, col = grid.cell_of(A[idx] + frac[:, None] * (B - A)[idx])
    ok = (row >= 0) & (row < grid.n) & (col >= 0) & (col < grid.n)
    flat = row * grid.n + col
    flat[~ok] = -1
    return owner, flat


def _filled_clusters(clusters: list, loops: list, grid: Grid) -> list:
    """Per cluster: (filled area, row0, col0, filled crop) or None if off-grid."""
    owner, flat = _trace_cells(loops, grid)
    cluster_of = np.full(len(loops), -1)
    for ci, members in enumerate(clusters):
        cluster_of[members] = ci
    keep = (flat >= 0) & (cluster_of[owner] >= 0) if len(loops) else np.zeros(0, bool)
    cl = cluster_of[owner[keep]]
    cells = flat[keep]
    order = np.argsort(cl, kind="stable")
    cl, cells = cl[order], cells[order]
    bounds = np.searchsorted(cl, np.arange(len(clusters) + 1))
    filled = []
    for ci in range(len(clusters)):
        c = np.unique(cells[bounds[ci] : bounds[ci + 1]])
        if c.size == 0:
            filled.append(None)
            continue
        r, q = np.divmod(c, grid.n)
        r0 = max(int(r.min()) - 1, 0)
        q0 = max(int(q.min()) - 1, 0)
        r1 = min(int(r.max()) + 2, grid.n)
        q1 = min(int(q.max()) + 2, grid.n)
        m = np.zeros((r1 - r0, q1 - q0), dtype=bool)
        m[r - r0, q - q0] = True
        if m.shape[0] > 2 and m.shape[1] > 2:
            m = ndimage.binary_fill_holes(m)
        filled.append((int(m.sum()), r0, q0, m))
    return filled


def _origin_loop(filled: list, grid: Grid, origin=(0.0, 0.0)) -> Loop | None:
    """Outer boundary of the outermost filled cluster covering the origin's cell."""
    o_r, o_c = (int(v[0]) for v in grid.cell_of(np.asarray(origin, dtype=float)))
    best = None
    for item in filled:
        if item is None:
            continue
        area, r0, q0, m = item
        rr, cc = o_r - r0, o_c - q0
        if 0 <= rr < m.shape[0] and 0 <= cc < m.shape[1] and m[rr, cc]:
            if best is None or area > best[0]:
                best = item
    if best is None:
        return None
    _, r0, q0, m = best
    m = ndimage.binary_fill_holes(largest_component(m))
    verts = trace_outer_contour(m, grid, r0, q0)
    loop = Loop(verts)
    return loop if loop.winding(origin)[0] != 0 else None


def outermost_boundaries(
    clusters: list,
    loops: list,
    raster_n: int,
    *,
    radius: float | None = None,
    clip: np.ndarray | None = None,
    origin=(0.0, 0.0),
) -> LoopEnsemble:
    """Outer boundaries of the outermost clusters, traced on a raster.

    Each cluster's loop traces are drawn on a ``raster_n``-square grid over
    ``[-radius, radius]^2`` and filled.  Clusters are visited by decreasing
    filled area; a cluster whose filled cells are mostly covered by an
    earlier one is nested and dropped.  Surviving clusters give up cells
    already owned or 4-adjacent to an owned cell, keeping their rasterized
    interiors pairwise disjoint.  ``clip`` restricts all clusters to a mask.
    """
    if raster_n < 256:
        raise ConfigError("raster_n must be at least 256")
    if radius is None:
        radius = max((float(np.abs(l.vertices).max()) for l in loops), default=1.0) * 1.001
    grid = Grid.square((0.0, 0.0), 2 * radius, raster_n)
    filled = _filled_clusters(clusters, loops, grid)
    owned = np.full(grid.shape, -1, dtype=np.int64)
    order = sorted((i for i in range(len(clusters)) if filled[i] is not None), key=lambda i: (-filled[i][0], i))
    accepted = []
    for ci in order:
        area, r0, q0, m = filled[ci]
        sub = owned[r0 : r0 + m.shape[0], q0 : q0 + m.shape[1]]
        covered = sub >= 0
        if covered[m].mean() > 0.5:
            continue
        blocked = dilate4(covered)
        m = m & ~blocked
        if clip is not None:
            m &= clip[r0 : r0 + m.shape[0], q0 : q0 + m.shape[1]]
        m = ndimage.binary_fill_holes(largest_component(m))
        if not m.any():
            continue
        sub[m] = ci
        verts = trace_outer_contour(m, grid, r0, q0)
        accepted.append((ci, Loop(verts)))

    domain = None
    o_r, o_c = grid.cell_of(np.asarray(origin, dtype=float))
    if 0 <= o_r[0] < grid.n and 0 <= o_c[0] < grid.n:
        holder = owned[o_r[0], o_c[0]]
        for ci, loop in accepted:
            if ci == holder and loop.winding(origin)[0] != 0:
                domain = loop
    return LoopEnsemble(cle_loops=[l for _, l in accepted], domain_loop=domain, radius=radius)


def _inside_loops(loops: list, interior: np.ndarray, grid: Grid) -> list:
    owner, flat = _trace_cells(loops, grid)
    bad = np.zeros(len(loops), dtype=bool)
    outside = flat < 0
    outside[~outside] = ~interior.ravel()[flat[~outside]]
    bad[owner[outside]] = True
    return [i for i in range(len(loops)) if not bad[i]]


def sample_ensemble(config: SoupConfig) -> LoopEnsemble:
    """CLE loops inside the loop surrounding the origin.

    Attempt ``a`` uses the child stream ``(seed, a)``.  Soups without a loop
    around the origin, or whose loop around the origin encloses less than
    ``min_domain_fraction`` of the disk area, are resampled up to
    ``max_attempts`` times.
    """
    R = config.domain_radius
    grid = Grid.square((0.0, 0.0), 2 * R, config.raster_n)
    for attempt in range(config.max_attempts):
        rng = make_rng(config.seed, attempt)
        loops = sample_loop_soup(config, rng)
        domain = _origin_loop(_filled_clusters(cluster_loops(loops), loops, grid), grid)
        if domain is None or domain.area() < config.min_domain_fraction * math.pi * R * R:
            continue
        interior = erode4(polygon_mask(domain.vertices, grid))
        inner_idx = _inside_loops(loops, interior, grid)
        inner_loops = [loops[i] for i in inner_idx]
        inner = outermost_boundaries(cluster_loops(inner_loops), inner_loops, config.raster_n, radius=R, clip=interior)
        return LoopEnsemble(
            cle_loops=inner.cle_loops,
            domain_loop=domain,
            radius=R,
            kappa=config.kappa,
            intensity=config.c,
            seed=config.seed,
            notes=[RESTRICTION_NOTE, CUTOFF_NOTE, f"attempts={attempt + 1}"],
        )
    raise NoDomainLoop(f"no loop surrounds the origin after {config.max_attempts} attempts")


# -- serialization -----------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_ensemble_text(ensemble: LoopEnsemble, path) -> None:
    """Header ``kappa intensity seed``, metadata comments, then ``k x1 y1 ... xk yk`` lines.

    The domain loop, when present, is the first loop line and is announced
    by ``# domain_loop 1``.
    """
    lines = [f"{_fmt(ensemble.kappa)} {_fmt(ensemble.intensity)} {int(ensemble.seed)}"]
    lines.append(f"# radius {_fmt(ensemble.radius)}")
    if ensemble.manifest is not None:
        lines.append(f"# manifest {ensemble.manifest.hash}")
    lines.append(f"# domain_loop {int(ensemble.domain_loop is not None)}")
    loops = ([ensemble.domain_loop] if ensemble.domain_loop is not None else []) + list(ensemble.cle_loops)
    for loop in loops:
        v = loop.vertices
        lines.append(" ".join([str(len(v))] + [_fmt(x) for x in v.ravel()]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ensemble_text(path) -> LoopEnsemble:
    with open(path) as fh:
        raw = [ln.strip() for ln in fh if ln.strip()]
    kappa, intensity, seed = raw[0].split()
    meta = {}
    loops = []
    for ln in raw[1:]:
        if ln.startswith("#"):
            parts = ln[1:].split()
            meta[parts[0]] = parts[1] if len(parts) > 1 else ""
            continue
        tok = ln.split()
        k = int(tok[0])
        vals = np.array(tok[1:], dtype=float)
        if vals.size != 2 * k:
            raise ValueError(f"loop line declares {k} vertices but has {vals.size} coordinates")
        loops.append(Loop(vals.reshape(k, 2)))
    has_domain = meta.get("domain_loop", "0") == "1"
    domain = loops.pop(0) if has_domain else None
    return LoopEnsemble(
        cle_loops=loops,
        domain_loop=domain,
        radius=float(meta.get("radius", "nan")),
        kappa=float(kappa),
        intensity=float(intensity),
        seed=int(seed),
    )


_MAGIC = b"CLEENS01"


def write_ensemble_binary(ensemble: LoopEnsemble, path) -> None:
    """Little-endian binary form.

    Layout: magic, float64 kappa/intensity/radius, uint64 seed, uint8
    has_domain, uint64 loop count, then per loop a uint64 vertex count
    followed by the float64 coordinates x1 y1 ... xk yk.
    """
    loops = ([ensemble.domain_loop] if ensemble.domain_loop is not None else []) + list(ensemble.cle_loops)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<dddQBQ", ensemble.kappa, ensemble.intensity, ensemble.radius,
                             int(ensemble.seed) & ((1 << 64) - 1), int(ensemble.domain_loop is not None), len(loops)))
        for loop in loops:
            fh.write(struct.pack("<Q", len(loop)))
            fh.write(loop.vertices.astype("<f8").tobytes())


def read_ensemble_binary(path) -> LoopEnsemble:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise ValueError("not a loop-ensemble binary file")
    head = struct.Struct("<dddQBQ")
    kappa, intensity, radius, seed, has_domain, count = head.unpack_from(data, 8)
    off = 8 + head.size
    loops = []
    for _ in range(count):
        (k,) = struct.unpack_from("<Q", data, off)
        off += 8
        v = np.frombuffer(data, dtype="<f8", count=2 * k, offset=off).reshape(k, 2)
        off += 16 * k
        loops.append(Loop(v.astype(float)))
    domain = loops.pop(0) if has_domain else None
    return LoopEnsemble(loops, domain, radius, kappa, intensity, int(seed))
