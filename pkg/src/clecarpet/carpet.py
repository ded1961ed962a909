"""Carpet rasterization and the epsilon-box chemical distance.

The carpet is discretized on an ``n x n`` grid.  For a box side ``eps`` every
cell is assigned to the box containing its centre; the nodes of the box
graph are the 4-connected pieces of carpet inside a single box, and two
nodes are adjacent when some carpet cell of one is 4-adjacent to a carpet
cell of the other.  Splitting boxes into pieces keeps paths from tunnelling
through a hole that merely cuts a box in two.

Distances are counted in boxes: a path visiting ``k`` nodes costs ``k``
boxes and has area estimate ``k * eps**2``; a single point costs one box.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, PngImagePlugin
from scipy import ndimage
from scipy.spatial import cKDTree

from . import ConfigError
from .geometry import Grid, dilate4, largest_component, polygon_mask, trace_outer_contour, trace_points

__all__ = [
    "EXTERIOR",
    "HOLE",
    "CARPET",
    "COVER_LOWER",
    "COVER_UPPER",
    "CarpetMask",
    "PathCost",
    "BoxGraph",
    "DistanceField",
    "SnapError",
    "Disconnected",
    "rasterize_carpet",
    "box_graph",
    "bfs",
    "chem_dist",
    "len_eps_exact",
    "disjoint_disk_count",
    "boundary_net",
    "boundary_diameter",
    "distance_field",
    "write_pgm",
    "read_pgm",
    "render_field",
    "COLOR_RAMP",
]

EXTERIOR, HOLE, CARPET = 0, 1, 2
_PGM_LEVEL = {EXTERIOR: 0, HOLE: 128, CARPET: 255}

# Len_eps of a connected set versus eps^2 times its box count
COVER_LOWER = 1.0 / 18.0
COVER_UPPER = 9.0 * np.pi


class SnapError(ValueError):
    """No carpet cell within eps of the query point."""


class Disconnected(ValueError):
    """The two points lie in different carpet components."""


@dataclass(frozen=True, eq=False)
class CarpetMask:
    """Cell classification of a carpet on a square grid.

    ``cells[row, col]`` is one of EXTERIOR, HOLE, CARPET; the grid's lower
    left corner is ``(x0, y0)`` and its cells have side ``h``.
    """

    cells: np.ndarray
    h: float
    x0: float
    y0: float
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        c = np.asarray(self.cells, dtype=np.uint8)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("cells must be a square 2-D array")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "cells", c)

    @property
    def n(self) -> int:
        return self.cells.shape[0]

    @property
    def grid(self) -> Grid:
        return Grid(self.n, self.h, self.x0, self.y0)

    @property
    def carpet(self) -> np.ndarray:
        return self.cells == CARPET

    @property
    def inside(self) -> np.ndarray:
        return self.cells != EXTERIOR

    @property
    def boundary_cells(self) -> np.ndarray:
        """(row, col) of carpet cells 4-adjacent to an exterior cell or the grid edge."""
        if "boundary" not in self._cache:
            outside = ~np.pad(self.inside, 1)
            near = dilate4(outside)[1:-1, 1:-1]
            self._cache["boundary"] = np.argwhere(self.carpet & near)
        return self._cache["boundary"]

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        return self.x0, self.y0, self.x0 + self.n * self.h, self.y0 + self.n * self.h

    def cell_center(self, row, col) -> np.ndarray:
        return self.grid.center_of(row, col)

    def snap(self, point, eps: float) -> tuple[int, int]:
        """Cell of ``point`` if carpet, else the nearest carpet cell within ``eps``."""
        r, c = (int(v[0]) for v in self.grid.cell_of(np.asarray(point, dtype=float)))
        if 0 <= r < self.n and 0 <= c < self.n and self.cells[r, c] == CARPET:
            return r, c
        if "kdtree" not in self._cache:
            idx = np.argwhere(self.carpet)
            self._cache["kdtree"] = (cKDTree(self.grid.center_of(idx[:, 0], idx[:, 1])) if len(idx) else None, idx)
        tree, idx = self._cache["kdtree"]
        if tree is None:
            raise SnapError("mask has no carpet cells")
        d, k = tree.query(np.asarray(point, dtype=float))
        if not np.isfinite(d) or d > eps:
            raise SnapError(f"no carpet cell within {eps} of {tuple(point)}")
        return int(idx[k, 0]), int(idx[k, 1])

    def carpet_fraction(self) -> float:
        inside = int(self.inside.sum())
        return float(self.carpet.sum()) / inside if inside else 0.0


@dataclass
class PathCost:
    eps: float
    boxes: int
    exact_area: float | None = None
    path: np.ndarray | None = field(default=None, repr=False)

    @property
    def area_estimate(self) -> float:
        return self.boxes * self.eps**2


def rasterize_carpet(ensemble, n: int) -> CarpetMask:
    """Classify grid cells as exterior, hole (inside a CLE loop) or carpet.

    The grid covers the ensemble's sampling square ``[-R, R]^2``, so the
    cell size ``h = 2R / n`` is the same for every ensemble with equal R.
    """
    if ensemble.domain_loop is None:
        raise ValueError("ensemble has no domain loop")
    if n < 256:
        raise ConfigError("carpet grid must have n >= 256")
    grid = ensemble.grid(n)
    inside = polygon_mask(ensemble.domain_loop.vertices, grid)
    hole = np.zeros(grid.shape, dtype=bool)
    for loop in ensemble.cle_loops:
        hole |= polygon_mask(loop.vertices, grid)
    cells = np.full(grid.shape, EXTERIOR, dtype=np.uint8)
    cells[inside] = CARPET
    cells[inside & hole] = HOLE
    return CarpetMask(cells, grid.h, grid.x0, grid.y0)


@dataclass(eq=False)
class BoxGraph:
    """Epsilon-box graph of a carpet mask.

    ``label[row, col]`` is the node of a carpet cell (-1 elsewhere);
    ``node_box[k]`` is the (box_row, box_col) of node ``k``.  Adjacency is
    stored in CSR form (``indptr``, ``indices``).
    """

    eps: float
    label: np.ndarray
    node_box: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    box_shape: tuple

    @property
    def num_nodes(self) -> int:
        return len(self.node_box)

    def neighbors(self, k: int) -> np.ndarray:
        return self.indices[self.indptr[k] : self.indptr[k + 1]]


def _box_index(n: int, h: float, eps: float) -> np.ndarray:
    return np.floor((np.arange(n) + 0.5) * h / eps).astype(np.int64)


def box_graph(mask: CarpetMask, eps: float) -> BoxGraph:
    if eps < 4 * mask.h * (1 - 1e-9):
        raise ConfigError(f"eps={eps} is below 4h={4 * mask.h}")
    key = ("graph", float(eps))
    if key in mask._cache:
        return mask._cache[key]
    n = mask.n
    carpet = mask.carpet
    b = _box_index(n, mask.h, eps)
    nb = int(b[-1]) + 1
    # spread the cells apart at box seams so labelling cannot cross them
    rows = np.arange(n) + b
    spread = np.zeros((n + nb, n + nb), dtype=bool)
    spread[np.ix_(rows, rows)] = carpet
    lab, count = ndimage.label(spread)
    label = lab[np.ix_(rows, rows)].astype(np.int64) - 1
    # renumber nodes in row-major order of first appearance
    flat = label.ravel()
    seen = flat[flat >= 0]
    _, first = np.unique(seen, return_index=True)
    order = seen[np.sort(first)]
    remap = np.full(count, -1, dtype=np.int64)
    remap[order] = np.arange(order.size)
    label = np.where(label >= 0, remap[np.maximum(label, 0)], -1)

    cells = np.argwhere(label >= 0)
    node_box = np.zeros((order.size, 2), dtype=np.int64)
    node_box[label[cells[:, 0], cells[:, 1]]] = np.column_stack([b[cells[:, 0]], b[cells[:, 1]]])

    h_pairs = (label[:, :-1] >= 0) & (label[:, 1:] >= 0) & (b[:-1] != b[1:])[None, :]
    v_pairs = (label[:-1, :] >= 0) & (label[1:, :] >= 0) & (b[:-1] != b[1:])[:, None]
    src = np.concatenate([label[:, :-1][h_pairs], label[:-1, :][v_pairs]])
    dst = np.concatenate([label[:, 1:][h_pairs], label[1:, :][v_pairs]])
    m = order.size
    codes = np.unique(np.concatenate([src * m + dst, dst * m + src]))
    a, c = np.divmod(codes, m) if m else (codes, codes)
    indptr = np.zeros(m + 1, dtype=np.int64)
    np.add.at(indptr, a + 1, 1)
    indptr = np.cumsum(indptr)
    graph = BoxGraph(float(eps), label, node_box, indptr, c.astype(np.int64), (nb, nb))
    mask._cache[key] = graph
    return graph


def bfs(graph: BoxGraph, sources) -> tuple[np.ndarray, np.ndarray]:
    """Hop distances (-1 if unreachable) and BFS parents from a set of source nodes."""
    sources = np.unique(np.atleast_1d(np.asarray(sources, dtype=np.int64)))
    dist = np.full(graph.num_nodes, -1, dtype=np.int64)
    parent = np.full(graph.num_nodes, -1, dtype=np.int64)
    dist[sources] = 0
    frontier = sources
    level = 0
    indptr, indices = graph.indptr, graph.indices
    while frontier.size:
        starts = indptr[frontier]
        cnt = indptr[frontier + 1] - starts
        total = int(cnt.sum())
        if total == 0:
            break
        offs = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        nbr = indices[np.repeat(starts, cnt) + offs]
        par = np.repeat(frontier, cnt)
        fresh = dist[nbr] < 0
        nbr, par = nbr[fresh], par[fresh]
        nbr, first = np.unique(nbr, return_index=True)
        level += 1
        dist[nbr] = level
        parent[nbr] = par[first]
        frontier = nbr
    return dist, parent


def _grid_path(allowed: np.ndarray, start, goal) -> np.ndarray:
    """Shortest 4-connected cell path inside ``allowed`` from start to goal, as (k, 2) cells."""
    n0, n1 = allowed.shape
    dist = np.full(allowed.shape, -1, dtype=np.int64)
    dist[start] = 0
    frontier = np.array([start])
    step = 0
    moves = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]])
    while frontier.size and dist[goal] < 0:
        cand = (frontier[:, None, :] + moves[None, :, :]).reshape(-1, 2)
        ok = (cand[:, 0] >= 0) & (cand[:, 0] < n0) & (cand[:, 1] >= 0) & (cand[:, 1] < n1)
        cand = cand[ok]
        cand = cand[allowed[cand[:, 0], cand[:, 1]] & (dist[cand[:, 0], cand[:, 1]] < 0)]
        cand = np.unique(cand, axis=0)
        step += 1
        dist[cand[:, 0], cand[:, 1]] = step
        frontier = cand
    if dist[goal] < 0:
        raise Disconnected("no cell path inside the node path")
    path = [np.array(goal)]
    cur = np.array(goal)
    while dist[tuple(cur)] > 0:
        for mv in moves:
            nxt = cur + mv
            if 0 <= nxt[0] < n0 and 0 <= nxt[1] < n1 and dist[tuple(nxt)] == dist[tuple(cur)] - 1:
                cur = nxt
                break
        path.append(cur)
    return np.array(path[::-1])


def len_eps_exact(path, eps: float, resolution: float) -> float:
    """Area of the union of eps-disks centred on a path, by fine-grid occupancy.

    The polyline is resampled at spacing ``<= resolution`` and every grid cell
    of side ``resolution`` whose centre lies within ``eps`` of a sample
    counts fully.
    """
    if resolution > eps / 8 * (1 + 1e-12):
        raise ConfigError("resolution must be at most eps/8")
    pts = np.atleast_2d(np.asarray(path, dtype=float))
    if len(pts) > 1:
        pts = trace_points(pts, resolution, closed=False)
    tree = cKDTree(pts)
    lo = pts.min(axis=0) - eps
    hi = pts.max(axis=0) + eps
    nx = int(np.ceil((hi[0] - lo[0]) / resolution))
    ny = int(np.ceil((hi[1] - lo[1]) / resolution))
    xs = lo[0] + (np.arange(nx) + 0.5) * resolution
    count = 0
    chunk = max(1, 400_000 // max(nx, 1))
    for j0 in range(0, ny, chunk):
        ys = lo[1] + (np.arange(j0, min(ny, j0 + chunk)) + 0.5) * resolution
        X, Y = np.meshgrid(xs, ys)
        d, _ = tree.query(np.column_stack([X.ravel(), Y.ravel()]), distance_upper_bound=eps * (1 + 1e-12))
        count += int(np.isfinite(d).sum())
    return count * resolution**2


def disjoint_disk_count(path, eps: float) -> int:
    """Greedy count of path points pairwise at least 2*eps apart.

    Disks of radius eps around them are disjoint and lie in the
    eps-neighbourhood of the path, so pi eps^2 times this count bounds
    Len_eps from below.
    """
    pts = np.atleast_2d(np.asarray(path, dtype=float))
    chosen: list = []
    for p in pts:
        if all(np.hypot(*(p - q)) >= 2 * eps for q in chosen):
            chosen.append(p)
    return len(chosen)


def _node_of(mask: CarpetMask, graph: BoxGraph, point, eps: float) -> tuple[int, tuple]:
    cell = mask.snap(point, eps)
    return int(graph.label[cell]), cell


def chem_dist(mask: CarpetMask, eps: float, z, w, refine: bool = False) -> PathCost:
    """Minimal number of epsilon-boxes on a carpet path from z to w.

    With ``refine`` the realized cell path is recovered and its exact
    eps-neighbourhood area is measured at resolution ``min(h, eps/8)``.
    """
    graph = box_graph(mask, eps)
    a, ca = _node_of(mask, graph, z, eps)
    b, cb = _node_of(mask, graph, w, eps)
    dist, parent = bfs(graph, a)
    if dist[b] < 0:
        raise Disconnected(f"{tuple(z)} and {tuple(w)} are not joined through the carpet")
    cost = PathCost(eps=float(eps), boxes=int(dist[b]) + 1)
    if refine:
        nodes = [b]
        while nodes[-1] != a:
            nodes.append(int(parent[nodes[-1]]))
        allowed = np.isin(graph.label, nodes)
        cells = _grid_path(allowed, ca, cb)
        pts = mask.cell_center(cells[:, 0], cells[:, 1])
        cost.path = pts
        res = min(mask.h, eps / 8)
        cost.exact_area = len_eps_exact(pts, eps, res)
        # occupancy counting sees at least a disk of radius eps - res/sqrt(2) around each centre
        disks = disjoint_disk_count(pts, eps) * np.pi * (eps - res / np.sqrt(2)) ** 2
        if cost.exact_area < disks:
            raise AssertionError(f"exact area {cost.exact_area} below the disjoint-disk bound {disks}")
        lo = COVER_LOWER * cost.area_estimate
        hi = COVER_UPPER * cost.area_estimate
        if not lo <= cost.exact_area <= hi:
            raise AssertionError(f"exact area {cost.exact_area} outside [{lo}, {hi}]")
    return cost


def boundary_net(mask: CarpetMask, net_count: int) -> np.ndarray:
    """``net_count`` distinct boundary carpet cells spread by arc length along the outer contour."""
    if net_count < 2:
        raise ConfigError("net_count must be at least 2")
    bc = mask.boundary_cells
    if len(bc) < net_count:
        raise ConfigError(f"only {len(bc)} boundary cells for a net of {net_count}")
    region = ndimage.binary_fill_holes(largest_component(mask.inside))
    contour = trace_outer_contour(region, mask.grid)
    seg = np.hypot(*(np.roll(contour, -1, axis=0) - contour).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.arange(net_count) * s[-1] / net_count
    closed = np.vstack([contour, contour[:1]])
    pts = np.column_stack([np.interp(targets, s, closed[:, 0]), np.interp(targets, s, closed[:, 1])])
    tree = cKDTree(mask.cell_center(bc[:, 0], bc[:, 1]))
    used: set = set()
    net = []
    for p in pts:
        _, ks = tree.query(p, k=min(len(bc), net_count + 1))
        for k in np.atleast_1d(ks):
            if int(k) not in used:
                used.add(int(k))
                net.append(bc[k])
                break
    return np.array(net)


def boundary_diameter(mask: CarpetMask, eps: float, net_count: int = 16, return_net: bool = False, net=None):
    """Largest box-count distance between cells of a boundary net, times eps^2.

    ``net`` (rows of row, col) replaces the arc-length net when given.
    Pairs lying in different carpet components are skipped; if no pair of
    net cells is connected the mask is malformed and Disconnected is raised.
    """
    if net is None:
        if net_count < 16:
            raise ConfigError("net_count must be at least 16")
        net = boundary_net(mask, net_count)
    net = np.asarray(net, dtype=np.int64).reshape(-1, 2)
    graph = box_graph(mask, eps)
    nodes = graph.label[net[:, 0], net[:, 1]]
    best = -1
    for k, node in enumerate(nodes):
        dist, _ = bfs(graph, node)
        d = dist[nodes]
        d = d[d >= 0]
        if d.size > 1 or (d.size == 1 and len(nodes) == 1):
            best = max(best, int(d.max()))
    if best < 0:
        raise Disconnected("boundary net is not joined through the carpet")
    value = (best + 1) * eps**2
    return (value, net) if return_net else value


@dataclass
class DistanceField:
    """Box-count distances on the box lattice; -1 marks unreachable or empty boxes."""

    eps: float
    boxes: np.ndarray
    source_box: tuple
    node_dist: np.ndarray = field(repr=False)

    @property
    def reachable(self) -> np.ndarray:
        return self.boxes > 0


def distance_field(mask: CarpetMask, eps: float, source) -> DistanceField:
    """Single-source box counts to every box (minimum over the box's carpet pieces)."""
    graph = box_graph(mask, eps)
    a, _ = _node_of(mask, graph, source, eps)
    dist, _ = bfs(graph, a)
    boxes = np.full(graph.box_shape, -1, dtype=np.int64)
    ok = dist >= 0
    nb = graph.node_box[ok]
    vals = dist[ok] + 1
    order = np.argsort(-vals, kind="stable")
    boxes[nb[order, 0], nb[order, 1]] = vals[order]
    return DistanceField(float(eps), boxes, tuple(int(v) for v in graph.node_box[a]), dist)


# -- file formats -------------------------------------------------------------

def write_pgm(mask: CarpetMask, path, manifest_hash: str | None = None) -> None:
    """Binary PGM (P5) with levels 0 exterior / 128 hole / 255 carpet, plus ``.json`` sidecar.

    Row 0 of the image is the top (largest y) row of the grid.
    """
    lut = np.zeros(256, dtype=np.uint8)
    for k, v in _PGM_LEVEL.items():
        lut[k] = v
    img = lut[mask.cells[::-1]]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mask.n} {mask.n}\n255\n".encode())
        fh.write(img.tobytes())
    side = {"n": mask.n, "h": mask.h, "bbox": list(mask.bbox)}
    if manifest_hash is not None:
        side["manifest"] = manifest_hash
    with open(str(path) + ".json", "w") as fh:
        json.dump(side, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_pgm(path) -> CarpetMask:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, hgt, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255 or w != hgt:
        raise ValueError("expected a square 8-bit PGM")
    img = np.frombuffer(parts[4][: w * hgt], dtype=np.uint8).reshape(hgt, w)[::-1]
    cells = np.full(img.shape, EXTERIOR, dtype=np.uint8)
    cells[img == 128] = HOLE
    cells[img == 255] = CARPET
    with open(str(path) + ".json") as fh:
        side = json.load(fh)
    return CarpetMask(cells, float(side["h"]), float(side["bbox"][0]), float(side["bbox"][1]))


# Piecewise-linear ramp from near (distance 1) to far (maximum distance).
COLOR_RAMP = np.array(
    [
        [48, 18, 59],
        [70, 107, 227],
        [26, 228, 182],
        [164, 252, 60],
        [251, 185, 56],
        [209, 58, 12],
        [122, 4, 3],
    ],
    dtype=np.float64,
)
HOLE_RGB = (235, 235, 235)
EXTERIOR_RGB = (255, 255, 255)
UNREACHED_RGB = (0, 0, 0)


def _ramp(t: np.ndarray) -> np.ndarray:
    x = np.clip(t, 0.0, 1.0) * (len(COLOR_RAMP) - 1)
    i = np.minimum(np.floor(x).astype(np.int64), len(COLOR_RAMP) - 2)
    f = (x - i)[..., None]
    return np.rint(COLOR_RAMP[i] * (1 - f) + COLOR_RAMP[i + 1] * f).astype(np.uint8)


def render_field(mask: CarpetMask, field_: DistanceField, path, manifest_hash: str | None = None) -> None:
    """PNG of the carpet coloured by box distance from the field's source.

    Carpet cell colour is ``COLOR_RAMP`` at ``(d - 1) / (d_max - 1)`` of its
    node's distance ``d``; holes are light grey, exterior white, carpet
    unreachable from the source black.
    """
    graph = box_graph(mask, field_.eps)
    rgb = np.empty(mask.cells.shape + (3,), dtype=np.uint8)
    rgb[...] = EXTERIOR_RGB
    rgb[mask.cells == HOLE] = HOLE_RGB
    d = np.where(graph.label >= 0, field_.node_dist[np.maximum(graph.label, 0)], -1)
    reach = d >= 0
    dmax = max(int(d.max()), 1)
    rgb[mask.carpet & ~reach] = UNREACHED_RGB
    rgb[reach] = _ramp(d[reach] / dmax)
    info = PngImagePlugin.PngInfo()
    if manifest_hash is not None:
        info.add_text("manifest", manifest_hash)
    Image.fromarray(rgb[::-1]).save(path, format="PNG", pnginfo=info, optimize=False, compress_level=9)
