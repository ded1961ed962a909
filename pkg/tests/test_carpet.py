import math

import numpy as np
import pytest
from PIL import Image

from clecarpet import ConfigError
from clecarpet.carpet import (
    CARPET, EXTERIOR, HOLE, CarpetMask, Disconnected, SnapError, bfs, boundary_diameter, boundary_net, box_graph,
    chem_dist, disjoint_disk_count, distance_field, len_eps_exact, rasterize_carpet, read_pgm, render_field,
    write_pgm,
)
from clecarpet.geometry import Loop
from clecarpet.rng import make_rng
from clecarpet.soup import LoopEnsemble
from oracles import cell_box_distances


def circle(r, k=512, cx=0.0, cy=0.0):
    th = np.linspace(0, 2 * np.pi, k, endpoint=False)
    return Loop(np.column_stack([cx + r * np.cos(th), cy + r * np.sin(th)]))


def empty_square(n=256):
    return CarpetMask(np.full((n, n), CARPET, dtype=np.uint8), 1.0 / n, 0.0, 0.0)


# -- rasterization ------------------------------------------------------------

def test_rasterize_without_loops_is_all_carpet():
    ens = LoopEnsemble([], circle(0.8), 1.0)
    m = rasterize_carpet(ens, 256)
    assert not (m.cells == HOLE).any()
    assert m.carpet.sum() == m.inside.sum() > 0


def test_rasterize_annulus_area_ratio():
    n = 256
    ens = LoopEnsemble([circle(0.4)], circle(0.8), 1.0)
    m = rasterize_carpet(ens, n)
    ratio = (m.cells == HOLE).sum() / m.inside.sum()
    assert abs(ratio - 0.25) <= 2 / n


def test_rasterize_requires_domain():
    with pytest.raises(ValueError):
        rasterize_carpet(LoopEnsemble([], None, 1.0), 256)
    with pytest.raises(ConfigError):
        rasterize_carpet(LoopEnsemble([], circle(0.5), 1.0), 128)


def test_sampled_mask_invariants(small_ensemble, small_mask):
    m = small_mask
    assert 0 < m.carpet_fraction() < 1
    bc = m.boundary_cells
    assert len(bc) and np.all(m.cells[bc[:, 0], bc[:, 1]] == CARPET)
    # every hole cell lies in exactly one CLE loop; carpet+hole is the domain interior
    from clecarpet.geometry import polygon_mask
    cover = np.zeros(m.cells.shape, dtype=np.int64)
    for l in small_ensemble.cle_loops:
        cover += polygon_mask(l.vertices, m.grid)
    inside = polygon_mask(small_ensemble.domain_loop.vertices, m.grid)
    assert np.array_equal(m.inside, inside)
    assert np.all(cover[m.cells == HOLE] == 1)


def test_pgm_roundtrip(tmp_path, small_mask):
    write_pgm(small_mask, tmp_path / "m.pgm", "abc")
    back = read_pgm(tmp_path / "m.pgm")
    assert np.array_equal(back.cells, small_mask.cells) and back.h == small_mask.h
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n256 256\n255\n")
    assert set(np.unique(np.frombuffer((tmp_path / "m.pgm").read_bytes()[15:], np.uint8))) <= {0, 128, 255}
    import json
    side = json.loads((tmp_path / "m.pgm.json").read_text())
    assert side["n"] == 256 and side["manifest"] == "abc" and len(side["bbox"]) == 4


# -- chemical distance --------------------------------------------------------

def test_same_box_is_one_box():
    c = chem_dist(empty_square(), 0.1, (0.01, 0.01), (0.05, 0.04))
    assert c.boxes == 1 and c.area_estimate == pytest.approx(0.01)


def test_straight_corridor():
    c = chem_dist(empty_square(), 0.1, (0.05, 0.05), (0.95, 0.05))
    assert c.boxes == 10 and c.area_estimate == pytest.approx(0.1)


def test_eps_below_4h_rejected():
    with pytest.raises(ConfigError):
        chem_dist(empty_square(), 3.9 / 256, (0.1, 0.1), (0.2, 0.2))


def test_snap_and_disconnected():
    cells = np.full((256, 256), CARPET, dtype=np.uint8)
    cells[:, 120:136] = HOLE
    m = CarpetMask(cells, 1 / 256, 0.0, 0.0)
    with pytest.raises(Disconnected):
        chem_dist(m, 0.05, (0.1, 0.5), (0.9, 0.5))
    with pytest.raises(SnapError):
        chem_dist(m, 4 / 256, (0.5, 0.5), (0.9, 0.5))
    # a point in a hole within eps of carpet snaps to it
    assert chem_dist(m, 0.05, (120.5 / 256, 0.5), (0.3, 0.5)).boxes >= 1


def test_box_graph_blocks_corner_tunnels():
    # two carpet pieces that share a box but touch only at a corner stay apart
    cells = np.full((256, 256), HOLE, dtype=np.uint8)
    cells[:128, :128] = CARPET
    cells[128:, 128:] = CARPET
    m = CarpetMask(cells, 1 / 256, 0.0, 0.0)
    with pytest.raises(Disconnected):
        chem_dist(m, 0.1, (0.2, 0.2), (0.8, 0.8))


def test_chem_dist_matches_cell_oracle(small_mask):
    m = small_mask
    rng = make_rng(3)
    cells = np.argwhere(m.carpet)
    for eps in (4 * m.h, 8 * m.h):
        g = box_graph(m, eps)
        srcs = cells[rng.integers(0, len(cells), 8)]
        for s in srcs:
            oracle = cell_box_distances(m.carpet, m.h, eps, tuple(s))
            dist, _ = bfs(g, g.label[tuple(s)])
            for t in cells[rng.integers(0, len(cells), 8)]:
                want = oracle[tuple(t)]
                got = dist[g.label[tuple(t)]]
                assert got == want


def test_refined_query_sandwich(small_mask):
    m = small_mask
    eps = 4 * m.h
    cells = np.argwhere(m.carpet)
    rng = make_rng(4)
    done = 0
    while done < 8:
        a, b = cells[rng.integers(0, len(cells), 2)]
        try:
            c = chem_dist(m, eps, m.cell_center(*a), m.cell_center(*b), refine=True)
        except Disconnected:
            continue
        assert (1 / 18) * c.area_estimate <= c.exact_area <= 9 * math.pi * c.area_estimate
        res = min(m.h, eps / 8)
        assert c.exact_area >= math.pi * (eps - res / math.sqrt(2)) ** 2 * disjoint_disk_count(c.path, eps)
        done += 1


def test_resolution_stability():
    # smallest soup loops (diameter ~ sqrt(t0)) must be resolved at the coarse grid
    from clecarpet.soup import SoupConfig, sample_ensemble
    ens = sample_ensemble(SoupConfig(min_duration=2e-4, seed=1))
    lo, hi = rasterize_carpet(ens, 256), rasterize_carpet(ens, 512)
    rng = make_rng(5)
    cells = np.argwhere(lo.carpet)
    for eps in (8 * lo.h, 16 * lo.h):
        ok = total = 0
        while total < 100:
            a, b = cells[rng.integers(0, len(cells), 2)]
            z, w = lo.cell_center(*a), lo.cell_center(*b)
            try:
                d1 = chem_dist(lo, eps, z, w).boxes
                d2 = chem_dist(hi, eps, z, w).boxes
            except (Disconnected, SnapError):
                continue
            total += 1
            ok += abs(d1 - d2) <= 1 + 0.1 * max(d1, d2)
        assert ok / total >= 0.95, (eps, ok / total)


# -- exact neighbourhood area -------------------------------------------------

def test_len_eps_point_disk():
    res = 0.1 / 16
    a = len_eps_exact([[0.3, 0.3]], 0.1, res)
    assert abs(a - math.pi * 0.01) <= 2 * res * 2 * math.pi * 0.1


def test_len_eps_stadium():
    res = 0.1 / 16
    a = len_eps_exact([[0, 0], [1, 0]], 0.1, res)
    assert abs(a - (0.2 + math.pi * 0.01)) <= 2 * res * (2 + 2 * math.pi * 0.1)


def test_len_eps_resolution_guard():
    with pytest.raises(ConfigError):
        len_eps_exact([[0, 0]], 0.1, 0.1 / 7)


def test_len_eps_monotone_in_eps():
    rng = make_rng(6)
    for _ in range(5):
        path = np.cumsum(rng.normal(scale=0.02, size=(100, 2)), axis=0)
        a = len_eps_exact(path, 0.02, 0.02 / 16)
        b = len_eps_exact(path, 0.04, 0.02 / 16)
        assert b >= a


# -- boundary diameter and fields ---------------------------------------------

def test_boundary_diameter_brute_force():
    ens = LoopEnsemble([], circle(0.8), 1.0)
    m = rasterize_carpet(ens, 256)
    eps = 0.1 * 1.6
    value, net = boundary_diameter(m, eps, 16, return_net=True)
    brute = max(
        chem_dist(m, eps, m.cell_center(*a), m.cell_center(*b)).area_estimate
        for i, a in enumerate(net) for b in net[i + 1:]
    )
    assert value == pytest.approx(brute)


def test_boundary_diameter_superset_monotone(small_mask):
    eps = 4 * small_mask.h
    net64 = boundary_net(small_mask, 64)
    sub = net64[make_rng(7).choice(64, 16, replace=False)]
    assert boundary_diameter(small_mask, eps, net=net64) >= boundary_diameter(small_mask, eps, net=sub)


def test_boundary_diameter_adjacent_cells_one_box():
    m = empty_square()
    assert boundary_diameter(m, 0.1, net=[[0, 0], [0, 1]]) == pytest.approx(0.01)


def test_boundary_net_distinct_cells(small_mask):
    net = boundary_net(small_mask, 32)
    assert len({tuple(c) for c in net}) == 32
    with pytest.raises(ConfigError):
        boundary_diameter(small_mask, 4 * small_mask.h, 8)


def test_distance_field_source_and_consistency(small_mask):
    m = small_mask
    eps = 4 * m.h
    src = m.cell_center(*m.boundary_cells[0])
    f = distance_field(m, eps, src)
    assert f.boxes[f.source_box] == 1
    g = box_graph(m, eps)
    rng = make_rng(8)
    reach = np.flatnonzero(f.node_dist >= 0)
    for k in rng.choice(reach, 32):
        cell = np.argwhere(g.label == k)[0]
        assert chem_dist(m, eps, src, m.cell_center(*cell)).boxes == f.node_dist[k] + 1


def test_distance_field_empty_carpet_is_manhattan():
    m = empty_square()
    f = distance_field(m, 0.1, (0.05, 0.05))
    nb = f.boxes.shape[0]
    I, J = np.indices((nb, nb))
    assert np.array_equal(f.boxes, I + J + 1)


def test_render_is_deterministic(tmp_path, small_mask):
    f = distance_field(small_mask, 4 * small_mask.h, small_mask.cell_center(*small_mask.boundary_cells[0]))
    render_field(small_mask, f, tmp_path / "a.png", "h1")
    render_field(small_mask, f, tmp_path / "b.png", "h1")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    img = Image.open(tmp_path / "a.png")
    assert img.size == (256, 256) and img.text["manifest"] == "h1"
    px = np.asarray(img)
    assert (px[small_mask.cells[::-1] == EXTERIOR] == 255).all()
