import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from epsbeta.errors import CubeOutsideGrid, InvalidCluster, ProfileMismatch
from epsbeta.grid import (
    Box, ColumnProfile, GridCluster, changed_cells, extract_boundary, rasterize_profiles, relabel_cells,
    vertical_sections,
)


def test_single_cell_has_four_unit_facets():
    facets = extract_boundary(GridCluster(np.array([[1]])))
    assert len(facets) == 4
    assert all(f.area == 1.0 and f.inside_label == 1 and f.outside_label == 0 for f in facets)
    assert sorted(f.normal for f in facets) == sorted([(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)])


def test_domino_has_seven_facets():
    facets = extract_boundary(GridCluster(np.array([[1], [2]])))
    assert len(facets) == 7
    shared = [f for f in facets if f.outside_label != 0]
    assert len(shared) == 1
    assert (shared[0].inside_label, shared[0].outside_label) == (1, 2)
    assert shared[0].normal == (1.0, 0.0)


def test_empty_cluster_has_no_boundary():
    assert extract_boundary(GridCluster(np.zeros((5, 4), dtype=int))) == []


@pytest.mark.parametrize("shape", [(0, 3), (3,), (2, 2, 2, 2)])
def test_invalid_shapes(shape):
    with pytest.raises(InvalidCluster):
        GridCluster(np.zeros(shape, dtype=int))


def test_invalid_labels_and_spacing():
    with pytest.raises(InvalidCluster):
        GridCluster(np.array([[3]]), m=2)
    with pytest.raises(InvalidCluster):
        GridCluster(np.array([[1]]), spacing=0.0)


def test_flat_sections():
    lab = np.zeros((4, 4), dtype=int)
    lab[:, :2] = 1
    lab[:, 2:] = 2
    secs = vertical_sections(GridCluster(lab), Box((0, 0), (4, 4)), axis=1)
    assert set(secs) == {(k,) for k in range(4)}
    for p in secs.values():
        assert p.breakpoints == (2.0,) and p.labels == (1, 2)


def test_single_cell_column_section():
    secs = vertical_sections(GridCluster(np.array([[1, 0, 0, 0]])), Box((0, 0), (1, 4)), axis=1)
    assert secs[(0,)].breakpoints == (1.0,) and secs[(0,)].labels == (1, 0)


def test_constant_column_has_no_breakpoints():
    secs = vertical_sections(GridCluster(np.full((1, 4), 2)), Box((0, 0), (1, 4)), axis=1)
    assert secs[(0,)].breakpoints == () and secs[(0,)].labels == (2,)


def test_sections_outside_grid():
    with pytest.raises(CubeOutsideGrid):
        vertical_sections(GridCluster(np.ones((4, 4), dtype=int)), Box((0, 0), (5, 4)))


def test_rasterize_round_trip_is_identity():
    rng = np.random.default_rng(1)
    c = GridCluster(rng.integers(0, 3, (6, 6)))
    box = Box((1, 1), (5, 6))
    out = rasterize_profiles(vertical_sections(c, box), c, box)
    assert np.array_equal(out.labels, c.labels)
    assert out.ledger == [] and not out.profiles


def test_shift_by_one_and_a_half_cells():
    lab = np.zeros((4, 4), dtype=int)
    lab[:, :2] = 1
    lab[:, 2:] = 2
    c = GridCluster(lab)
    box = Box((0, 0), (4, 4))
    shifted = {col: ColumnProfile(col, 0.0, 4.0, (3.5,), (1, 2)) for col in box.lateral(1)}
    out = rasterize_profiles(shifted, c, box, axis=1)
    # rows 2 fully and 3 half-occupied by 1: row 3 is a tie and goes to the lower label
    assert np.array_equal(out.labels[:, 2], [1] * 4)
    assert np.array_equal(out.labels[:, 3], [1] * 4)
    fracs = sorted({(idx[1], lab, d) for idx, lab, d in out.ledger})
    assert fracs == [(3, 1, -0.5), (3, 2, 0.5)]
    vols = np.bincount(out.labels.ravel(), minlength=3).astype(float)
    for _, lab, d in out.ledger:
        vols[lab] += d
    assert vols[1] == pytest.approx(14.0) and vols[2] == pytest.approx(2.0)


def test_zero_shift_is_identity():
    lab = np.zeros((4, 4), dtype=int)
    lab[:, :2] = 1
    c = GridCluster(lab)
    box = Box((0, 0), (4, 4))
    same = {col: ColumnProfile(col, 0.0, 4.0, (2.0,), (1, 0)) for col in box.lateral(1)}
    out = rasterize_profiles(same, c, box, axis=1)
    assert np.array_equal(out.labels, c.labels) and out.ledger == []


def test_profile_mismatch():
    c = GridCluster(np.ones((4, 4), dtype=int))
    box = Box((0, 0), (4, 4))
    with pytest.raises(ProfileMismatch):
        rasterize_profiles({(0,): ColumnProfile((0,), 0.0, 4.0, (), (1,))}, c, box, axis=1)
    with pytest.raises(ProfileMismatch):
        ColumnProfile((0,), 0.0, 4.0, (2.0, 1.0), (1, 2, 1))
    with pytest.raises(ProfileMismatch):
        ColumnProfile((0,), 0.0, 4.0, (2.0,), (1, 1))


def test_relabel_and_changed_cells():
    c = GridCluster(np.ones((4, 4), dtype=int), m=2)
    mask = np.zeros((4, 4), dtype=bool)
    mask[1, 2] = True
    d = relabel_cells(c, mask, 2)
    assert d.labels[1, 2] == 2 and c.labels[1, 2] == 1
    assert np.array_equal(changed_cells(c, d), mask)


labels_2d = arrays(np.int64, st.tuples(st.integers(1, 7), st.integers(1, 7)), elements=st.integers(0, 3))


@settings(max_examples=60, deadline=None)
@given(labels_2d, st.permutations([1, 2, 3]))
def test_boundary_is_permutation_equivariant(lab, perm):
    mapping = np.array([0, *perm])
    a = GridCluster(lab, m=3)
    b = GridCluster(mapping[lab], m=3)
    fa = {(f.location, f.area, frozenset((mapping[f.inside_label], mapping[f.outside_label])))
          for f in extract_boundary(a)}
    fb = {(f.location, f.area, frozenset((f.inside_label, f.outside_label))) for f in extract_boundary(b)}
    assert fa == fb


@settings(max_examples=60, deadline=None)
@given(labels_2d)
def test_chamber_areas_double_count_interior(lab):
    c = GridCluster(lab, m=3)
    t = c.facets
    per = sum(t.area[t.touching(n)].sum() for n in range(1, 4))
    interior = t.area[(t.inside != 0) & (t.outside != 0)].sum()
    exterior = t.area[(t.inside == 0) | (t.outside == 0)].sum()
    assert per == pytest.approx(2 * interior + exterior)
    assert all(f.inside_label != f.outside_label for f in extract_boundary(c))


@settings(max_examples=40, deadline=None)
@given(labels_2d, st.floats(0.05, 0.95))
def test_rasterize_conserves_volume(lab, frac):
    c = GridCluster(lab, m=3)
    n = lab.shape[1]
    box = Box((0, 0), lab.shape)
    h = frac * n
    profs = {col: ColumnProfile.normalized(col, 0.0, float(n), [h], [1, 2]) for col in box.lateral(1)}
    out = rasterize_profiles(profs, c, box, axis=1)
    vol = np.bincount(out.labels.ravel(), minlength=4).astype(float)
    for _, lab_, d in out.ledger:
        vol[lab_] += d
    assert vol[1] == pytest.approx(h * lab.shape[0], rel=1e-12)
    assert vol[2] == pytest.approx((n - h) * lab.shape[0], rel=1e-12)
