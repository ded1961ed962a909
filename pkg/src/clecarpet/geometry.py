"""Planar geometry primitives shared by the soup and carpet code.

Raster conventions: a :class:`Grid` covers the square
``[x0, x0 + n*h] x [y0, y0 + n*h]``; cell ``(row, col)`` has centre
``(x0 + (col + 0.5) h, y0 + (row + 0.5) h)``.  Arrays are indexed
``[row, col]``, i.e. ``[y, x]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage import measure

__all__ = [
    "Loop",
    "Grid",
    "winding_number",
    "segments_intersect",
    "polygon_mask",
    "trace_points",
    "largest_component",
    "dilate4",
    "erode4",
    "trace_outer_contour",
]


@dataclass(frozen=True, eq=False)
class Loop:
    """Closed polyline; the last vertex connects back to the first."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ValueError("loop vertices must have shape (k, 2)")
        if len(v) < 3:
            raise ValueError("a loop needs at least 3 vertices")
        object.__setattr__(self, "vertices", v)

    def __len__(self) -> int:
        return len(self.vertices)

    def __eq__(self, other) -> bool:
        return isinstance(other, Loop) and np.array_equal(self.vertices, other.vertices)

    @property
    def closed(self) -> bool:
        return True

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        v = self.vertices
        return v, np.roll(v, -1, axis=0)

    def bbox(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def length(self) -> float:
        a, b = self.segments()
        return float(np.hypot(*(b - a).T).sum())

    def area(self) -> float:
        """Unsigned shoelace area."""
        x, y = self.vertices.T
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    def winding(self, points) -> np.ndarray:
        return winding_number(self.vertices, points)


@dataclass(frozen=True)
class Grid:
    n: int
    h: float
    x0: float
    y0: float

    @classmethod
    def square(cls, center, side: float, n: int) -> "Grid":
        cx, cy = center
        return cls(int(n), side / n, cx - side / 2, cy - side / 2)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n, self.n

    @property
    def side(self) -> float:
        return self.n * self.h

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        c = (np.arange(self.n) + 0.5) * self.h
        return self.x0 + c, self.y0 + c

    def center_of(self, row, col) -> np.ndarray:
        row = np.asarray(row)
        col = np.asarray(col)
        return np.stack([self.x0 + (col + 0.5) * self.h, self.y0 + (row + 0.5) * self.h], axis=-1)

    def cell_of(self, points) -> tuple[np.ndarray, np.ndarray]:
        """(row, col) of the cell containing each point; may fall outside."""
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        col = np.floor((p[:, 0] - self.x0) / self.h).astype(np.int64)
        row = np.floor((p[:, 1] - self.y0) / self.h).astype(np.int64)
        return row, col


def winding_number(vertices, points) -> np.ndarray:
    """Winding number of the closed polyline ``vertices`` about each point.

    Uses the crossing-direction rule (Sunday's algorithm); points exactly on
    the polyline get an arbitrary but finite answer.
    """
    v = np.asarray(vertices, dtype=float)
    p = np.atleast_2d(np.asarray(points, dtype=float))
    a = v[None, :, :]
    b = np.roll(v, -1, axis=0)[None, :, :]
    px = p[:, 0, None]
    py = p[:, 1, None]
    cross = (b[..., 0] - a[..., 0]) * (py - a[..., 1]) - (px - a[..., 0]) * (b[..., 1] - a[..., 1])
    up = (a[..., 1] <= py) & (b[..., 1] > py) & (cross > 0)
    down = (a[..., 1] > py) & (b[..., 1] <= py) & (cross < 0)
    return up.sum(axis=1) - down.sum(axis=1)


def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _on_segment(ax, ay, bx, by, cx, cy):
    return (
        (np.minimum(ax, bx) <= cx) & (cx <= np.maximum(ax, bx))
        & (np.minimum(ay, by) <= cy) & (cy <= np.maximum(ay, by))
    )


def segments_intersect(p1, p2, q1, q2) -> np.ndarray:
    """Elementwise closed-segment intersection test for arrays of shape (m, 2)."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    ax, ay = p1[..., 0], p1[..., 1]
    bx, by = p2[..., 0], p2[..., 1]
    cx, cy = q1[..., 0], q1[..., 1]
    dx, dy = q2[..., 0], q2[..., 1]
    d1 = _orient(cx, cy, dx, dy, ax, ay)
    d2 = _orient(cx, cy, dx, dy, bx, by)
    d3 = _orient(ax, ay, bx, by, cx, cy)
    d4 = _orient(ax, ay, bx, by, dx, dy)
    proper = (np.sign(d1) * np.sign(d2) < 0) & (np.sign(d3) * np.sign(d4) < 0)
    touch = (
        ((d1 == 0) & _on_segment(cx, cy, dx, dy, ax, ay))
        | ((d2 == 0) & _on_segment(cx, cy, dx, dy, bx, by))
        | ((d3 == 0) & _on_segment(ax, ay, bx, by, cx, cy))
        | ((d4 == 0) & _on_segment(ax, ay, bx, by, dx, dy))
    )
    return proper | touch


def polygon_mask(vertices, grid: Grid) -> np.ndarray:
    """Cells of ``grid`` whose centre lies inside or on the closed polygon.

    Scanline fill with the even-odd rule; centres lying exactly on an edge
    count as inside.
    """
    v = np.asarray(vertices, dtype=float)
    out = np.zeros(grid.shape, dtype=bool)
    if len(v) < 3:
        return out
    xs, ys = grid.centers()
    ax, ay = v[:, 0], v[:, 1]
    bx, by = np.roll(ax, -1), np.roll(ay, -1)
    r_lo = max(int(np.ceil((ay.min() - grid.y0) / grid.h - 0.5)), 0)
    r_hi = min(int(np.floor((ay.max() - grid.y0) / grid.h - 0.5)), grid.n - 1)
    if r_hi < r_lo:
        return out
    rows = np.arange(r_lo, r_hi + 1)
    yc = ys[rows][:, None]
    ylo = np.minimum(ay, by)[None, :]
    yhi = np.maximum(ay, by)[None, :]
    sloped = (ay != by)[None, :]
    # half-open in y so shared vertices are counted once
    crosses = sloped & (ylo <= yc) & (yc < yhi)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (yc - ay[None, :]) / (by - ay)[None, :]
        xcross = ax[None, :] + t * (bx - ax)[None, :]
    for k, r in enumerate(rows):
        xc = np.sort(xcross[k, crosses[k]])
        if xc.size >= 2:
            lo = xc[0::2][: xc.size // 2]
            hi = xc[1::2][: xc.size // 2]
            c_lo = np.ceil((lo - grid.x0) / grid.h - 0.5).astype(np.int64)
            c_hi = np.floor((hi - grid.x0) / grid.h - 0.5).astype(np.int64)
            for a, b in zip(np.clip(c_lo, 0, grid.n), np.clip(c_hi, -1, grid.n - 1)):
                if b >= a:
                    out[r, a : b + 1] = True
        # the half-open scan misses horizontal edges and upper edge endpoints
        on = yhi[0] == yc[k, 0]
        if on.any():
            for e in np.nonzero(on)[0]:
                x_lo, x_hi = min(ax[e], bx[e]), max(ax[e], bx[e])
                c0 = max(int(np.ceil((x_lo - grid.x0) / grid.h - 0.5)), 0)
                c1 = min(int(np.floor((x_hi - grid.x0) / grid.h - 0.5)), grid.n - 1)
                if c1 < c0:
                    continue
                cols = np.arange(c0, c1 + 1)
                cross = _orient(ax[e], ay[e], bx[e], by[e], xs[cols], yc[k, 0])
                out[r, cols[cross == 0]] = True
    return out


def trace_points(vertices, spacing: float, closed: bool = True) -> np.ndarray:
    """Resample a polyline so that consecutive points are at most ``spacing`` apart."""
    v = np.asarray(vertices, dtype=float)
    b = np.roll(v, -1, axis=0) if closed else v[1:]
    a = v if closed else v[:-1]
    if len(a) == 0:
        return v.copy()
    seg = np.hypot(*(b - a).T)
    k = np.maximum(np.ceil(seg / spacing).astype(np.int64), 1)
    idx = np.repeat(np.arange(len(a)), k)
    start = np.cumsum(k) - k
    frac = (np.arange(k.sum()) - np.repeat(start, k)) / np.repeat(k, k)
    pts = a[idx] + frac[:, None] * (b - a)[idx]
    if not closed:
        pts = np.vstack([pts, v[-1:]])
    return pts


def dilate4(mask: np.ndarray) -> np.ndarray:
    """One step of 4-neighbour dilation (cells beyond the array edge are empty)."""
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def erode4(mask: np.ndarray) -> np.ndarray:
    """One step of 4-neighbour erosion (cells beyond the array edge count as empty)."""
    return ~dilate4(~np.pad(mask, 1))[1:-1, 1:-1]


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 4-connected component of a boolean mask (ties: lowest label)."""
    labels, count = ndimage.label(mask)
    if count <= 1:
        return labels > 0
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def trace_outer_contour(mask: np.ndarray, grid: Grid, row0: int = 0, col0: int = 0) -> np.ndarray | None:
    """Outer marching-squares contour of a 4-connected, hole-free mask.

    ``mask`` may be a crop whose (0, 0) cell is ``(row0, col0)`` of ``grid``.
    Contour points sit on cell-centre midpoints, so the polygon contains
    exactly the centres of the masked cells.  Returns (k, 2) domain-unit
    vertices, or None for an empty mask.
    """
    if not mask.any():
        return None
    padded = np.pad(mask.astype(np.float64), 1)
    contours = measure.find_contours(padded, 0.5, fully_connected="low")
    if not contours:
        return None
    c = max(contours, key=len)
    if np.array_equal(c[0], c[-1]):
        c = c[:-1]
    rows = c[:, 0] - 1 + row0
    cols = c[:, 1] - 1 + col0
    return np.column_stack([grid.x0 + (cols + 0.5) * grid.h, grid.y0 + (rows + 0.5) * grid.h])
