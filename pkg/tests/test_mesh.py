import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mwtomo import config
from mwtomo.cli import build_mesh
from mwtomo.mesh import (IN, OUT, OVERLAP, Box, RefinementError, build_hybrid, cfl_timestep,
                         element_ancestry, min_dihedral_angles, refine_local, refine_uniform,
                         time_grid)


def brute_edges(fe):
    x = fe.vertices[fe.tets]
    return np.array([np.linalg.norm(x[:, a] - x[:, b], axis=1)
                     for a, b in itertools.combinations(range(4), 2)]).T


def face_census(tets):
    counts = {}
    for t in tets:
        for f in itertools.combinations(sorted(t), 3):
            counts[f] = counts.get(f, 0) + 1
    return counts


def assert_conforming(fe):
    lo, hi = fe.vertices.min(axis=0), fe.vertices.max(axis=0)
    for f, c in face_census(fe.tets).items():
        assert c in (1, 2)
        if c == 1:
            x = fe.vertices[list(f)]
            assert np.any(np.all(np.isclose(x, lo), axis=0) | np.all(np.isclose(x, hi), axis=0))
    # no vertex sits at the midpoint of an element edge
    where = {tuple(np.round(v, 9)) for v in fe.vertices}
    for t in fe.tets:
        for a, b in itertools.combinations(t, 2):
            mid = tuple(np.round(0.5 * (fe.vertices[a] + fe.vertices[b]), 9))
            assert mid not in where


def test_default_geometry():
    m = build_mesh(config.defaults())
    assert m.fd.shape == (49, 54, 47)
    assert m.fe.n_vertices == 39 * 44 * 37 == 63492
    assert np.all(m.fe.signed_volumes > 0)
    assert np.allclose(m.fe.vertices.min(axis=0), (-0.7, -0.7, -0.7), atol=1e-9)
    assert np.allclose(m.fe.vertices.max(axis=0), (0.6984, 0.7018, 0.7004), atol=1e-9)
    tau0 = cfl_timestep(m, 1.0)
    assert tau0 == pytest.approx(0.0326 / math.sqrt(3), rel=1e-9)
    assert time_grid(3.0, cfl_timestep(m, 0.006 / tau0)) == (500, pytest.approx(0.006))


def test_box_errors():
    with pytest.raises(ValueError, match="clearance"):
        build_hybrid(Box.cube(0, 1), Box.cube(0, 0.8), [0.1] * 3)
    with pytest.raises(ValueError, match="nested"):
        build_hybrid(Box.cube(0, 1), Box.cube(0.2, 1.2), [0.1] * 3)
    with pytest.raises(ValueError, match="overlap"):
        build_hybrid(Box.cube(0, 1.2), Box.cube(0.2, 1.0), [0.1] * 3,
                     in_box=Box.cube(0.3, 0.9))


def test_classification_matches_geometry(small):
    """Coordinate-based census of every grid node against the stored sets."""
    fd, tol = small.fd, 1e-9
    x = fd.coords
    on = lambda v, a, b: np.any(np.isclose(v, a, atol=tol) | np.isclose(v, b, atol=tol), axis=1)
    inside = lambda v, a, b: np.all((v >= a - tol) & (v <= b + tol), axis=1)
    outer = on(x, 0.0, 12.0)
    fem_bd = inside(x, 3.0, 9.0) & on(x, 3.0, 9.0) & ~outer
    inner_bd = inside(x, 5.0, 7.0) & on(x, 5.0, 7.0) & ~outer & ~fem_bd
    strict_fem = np.all((x > 3.0 + tol) & (x < 9.0 - tol), axis=1)
    star = strict_fem & ~inner_bd
    plus = ~(outer | fem_bd | inner_bd | star)
    cls = small.classes
    assert np.array_equal(cls.omega_x, np.flatnonzero(outer))
    assert np.array_equal(cls.omega_o, np.flatnonzero(fem_bd))
    assert np.array_equal(cls.omega_diamond, np.flatnonzero(inner_bd))
    assert np.array_equal(cls.omega_star, np.flatnonzero(star))
    assert np.array_equal(cls.omega_plus, np.flatnonzero(plus))
    sizes = cls.sizes()
    assert sizes == {"o": 7 ** 3 - 5 ** 3, "diamond": 3 ** 3 - 1, "star": 5 ** 3 - 26,
                     "plus": 11 ** 3 - 7 ** 3, "x": 13 ** 3 - 11 ** 3}
    assert sum(sizes.values()) == small.n_nodes


def test_partners_coincide(desk):
    cls, fd, fe = desk.classes, desk.fd, desk.fe
    h = min(fd.spacing)
    for a, b in ((cls.o_fd, cls.o_fe), (cls.diamond_fd, cls.diamond_fe),
                 (cls.shared_fd, cls.shared_fe)):
        assert np.all(b >= 0)
        assert np.max(np.abs(fd.coords[a] - fe.vertices[b])) <= 1e-12 * h


def test_regions(small):
    fe = small.fe
    xc = fe.centroids
    in_geo = np.all((xc > 5) & (xc < 7), axis=1)
    ov_geo = ~np.all((xc > 5) & (xc < 7), axis=1)
    assert np.array_equal(fe.region == IN, in_geo)
    assert np.array_equal(fe.region == OVERLAP, ov_geo)
    assert not np.any(fe.region == OUT)
    assert fe.n_elements == 6 * 6 ** 3
    assert np.isclose(fe.volumes.sum(), 6.0 ** 3)


def test_refine_empty(desk):
    r = refine_local(desk, [])
    assert r.level == desk.level + 1
    assert np.array_equal(r.fe.vertices, desk.fe.vertices)
    assert np.array_equal(r.fe.tets, desk.fe.tets)


def test_refine_single_element(small):
    e = int(small.in_elements[0])
    r = refine_local(small, [e])
    children = np.flatnonzero(r.fe.parent == e)
    assert len(children) >= 2
    assert np.isclose(r.fe.volumes[children].sum(), small.fe.volumes[e])
    assert_conforming(r.fe)


def test_refine_all_in(small):
    r = refine_uniform(small, 1)
    n_in = len(small.in_elements)
    assert len(r.in_elements) >= 2 * n_in
    floor = 0.5 * min_dihedral_angles(small.fe).min()
    r3 = refine_uniform(small, 3)
    assert min_dihedral_angles(r3.fe).min() >= floor
    assert_conforming(r3.fe)


def test_overlap_rejected(small):
    e = int(np.flatnonzero(small.fe.region == OVERLAP)[0])
    with pytest.raises(ValueError, match="OVERLAP"):
        refine_local(small, [e])


def test_cfl_formula():
    m = build_hybrid(Box.cube(0, 1.2), Box.cube(0.2, 1.0), [0.1] * 3)
    assert cfl_timestep(m, 1.0) == pytest.approx(0.1 / math.sqrt(3))
    assert cfl_timestep(m, 0.5) == pytest.approx(0.05 / math.sqrt(3))


def test_cfl_after_refinement(small):
    r = refine_uniform(small, 3)
    brute = brute_edges(r.fe).min()
    assert brute == pytest.approx(0.5)
    assert cfl_timestep(r, 1.0) == pytest.approx(brute / math.sqrt(3))
    assert cfl_timestep(r, 1.0) == pytest.approx(0.5 * cfl_timestep(small, 1.0))


def test_time_grid():
    assert time_grid(3.0, 0.006) == (500, pytest.approx(0.006))
    n, tau = time_grid(1.0, 0.3)
    assert n == 4 and tau == pytest.approx(0.25)


def test_ancestry_and_overlap_immutable(small):
    seq = [small]
    for _ in range(2):
        seq.append(refine_local(seq[-1], seq[-1].in_elements[::3]))
    anc = element_ancestry(seq)
    vol = np.bincount(anc, weights=seq[-1].fe.volumes, minlength=small.fe.n_elements)
    assert np.allclose(vol, small.fe.volumes)
    ov0 = small.fe.tets[small.fe.region == OVERLAP]
    ov2 = seq[-1].fe.tets[seq[-1].fe.region == OVERLAP]
    assert np.array_equal(np.sort(small.fe.vertices[ov0].reshape(-1, 12), axis=0),
                          np.sort(seq[-1].fe.vertices[ov2].reshape(-1, 12), axis=0))


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(0, 47), max_size=10, unique=True))
def test_refine_random_marks(picks):
    m = build_hybrid(Box.cube(0.0, 12.0), Box.cube(3.0, 9.0), [1.0] * 3, out_layers=0)
    marked = m.in_elements[picks]
    r = refine_local(m, marked)
    assert np.all(r.fe.signed_volumes > 0)
    assert np.isclose(r.fe.volumes.sum(), m.fe.volumes.sum())
    assert np.array_equal(r.fe.region, m.fe.region[r.fe.parent])
    assert np.all(r.fe.marks[np.isin(r.fe.parent, marked)] >= 1)
    assert_conforming(r.fe)


def test_max_marks_caps(small):
    r = refine_local(small, small.in_elements)
    again = refine_local(r, r.in_elements, max_marks=1)
    assert again.fe.n_elements == r.fe.n_elements
