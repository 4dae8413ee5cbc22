import copy
import math

import numpy as np
import pytest

from epsbeta.density import constant, from_expressions
from epsbeta.errors import (
    BallNotBiphase, ConditionViolated, DisconnectedChamber, EmptyInterface, EpsilonTooLarge,
)
from epsbeta.grid import GridCluster, changed_cells
from epsbeta.measures import weighted_volume
from epsbeta.surgery import (
    CubeView, _VolumeMap, adjacency_graph, adjust_in_ball, adjust_single_chamber, find_interface_point,
    flatness_stats, good_set, order_pair, search_cube, select_subcube_and_strips, subcube_count_bound, transfer,
    transfer_constant,
)

from helpers import enclosed_pair, flat, nested_annuli, quadrants, two_squares, vertical_split

H64 = 1 / 64


def small_flat():
    return flat(64)


def eps_bar(cluster, fld, i, j):
    return search_cube(cluster, fld, i, j, 0.0).eps_bar


# -- interface point and pair ordering ------------------------------------------------

def test_pair_ordering():
    c = GridCluster(enclosed_pair(64), spacing=H64)
    assert order_pair(c, 1, 2) == (2, 1, True)
    assert order_pair(c, 2, 1) == (2, 1, False)
    assert order_pair(c, 0, 1) == (0, 1, False)
    with pytest.raises(ConditionViolated):
        order_pair(two_squares(), 1, 2)


def test_interface_point_lies_on_the_interface():
    c = GridCluster(enclosed_pair(64), spacing=H64)
    x = find_interface_point(c, 1, 2)
    v = np.round(x / H64).astype(int)
    # chamber 2 is the box [32, 48) x [16, 48); x is a vertex of its boundary
    on_x = v[0] in (32, 48) and 16 <= v[1] <= 48
    on_y = v[1] in (16, 48) and 32 <= v[0] <= 48
    assert on_x or on_y


def test_interface_point_errors():
    lab = np.zeros((16, 16), dtype=int)
    lab[2:6, 2:6] = 1
    lab[10:14, 10:14] = 2
    with pytest.raises(EmptyInterface):
        find_interface_point(GridCluster(lab), 1, 2)


def test_exterior_pair_is_accepted_without_swap():
    plan = search_cube(small_flat(), constant(), 0, 1, 0.0)
    assert (plan.i, plan.j, plan.swapped) == (0, 1, False)


# -- flatness -------------------------------------------------------------------------

def test_flat_cube_saturates_flatness():
    st = flatness_stats(small_flat(), (0.5, 0.5), 1, 0, 16 * H64, 0.1)
    assert st.interface_density_i == pytest.approx(1.0) and st.interface_density_j == pytest.approx(1.0)
    assert st.slab_excess == 0.0 and st.misvolume == 0.0 and st.passed


def test_single_cell_bump_misvolume():
    c = small_flat()
    lab = c.labels.copy()
    lab[32, 32] = 1
    st = flatness_stats(GridCluster(lab, spacing=H64), (0.5, 0.5), 1, 0, 16 * H64, 0.1)
    assert st.misvolume == pytest.approx(H64 ** 2)
    # h^2 = 2.4e-4 exceeds rho^3 a^2 = 6.25e-5
    assert "misvolume" in st.failures


def test_foreign_cell_boundary():
    lab = small_flat().labels.copy()
    lab[30, 28] = 2
    st = flatness_stats(GridCluster(lab, spacing=H64), (0.5, 0.5), 1, 0, 16 * H64, 0.1)
    assert st.foreign_boundary[2] == pytest.approx(4 * H64)
    assert ("foreign_2" in st.failures) == (not 4 * H64 < st.thresholds["foreign"])


def test_good_set_examples():
    c = small_flat()
    cols, _ = good_set(c, (0.5, 0.5), 1, 0, 16 * H64, 0.1)
    assert cols == {(k,) for k in range(24, 40)}
    lab = c.labels.copy()
    lab[30, 28] = 2
    lab[35, 32:34] = 1  # interface at a rho + one cell = 2.6 cells is outside the slab
    lab[35, 34] = 1
    cols, _ = good_set(GridCluster(lab, spacing=H64), (0.5, 0.5), 1, 0, 16 * H64, 0.1)
    assert (30,) not in cols and (35,) not in cols and len(cols) == 14


def test_subcube_count_bound():
    assert subcube_count_bound(1.0, 1 / 16, 2) == pytest.approx(2.0)


def test_boundary_mass_rejects_a_subcube():
    c = flat(32)
    fld = constant()
    eps = 0.5 * eps_bar(c, fld, 1, 0)
    plan = search_cube(c, fld, 1, 0, eps)
    fresh = copy.deepcopy(plan)
    select_subcube_and_strips(c, plan)
    assert plan.Q_eps == (9,) and plan.n_ell == 3 and plan.trace["Q_eps"]["tried"] == 1
    # bumps in alternate columns of the first tile (global columns 11..16)
    lab = c.labels.copy()
    lab[[11, 13, 15], 16] = 1
    select_subcube_and_strips(GridCluster(lab, spacing=c.spacing), fresh)
    assert fresh.Q_eps == (15,) and fresh.trace["Q_eps"]["tried"] == 2


def test_transfer_constant():
    assert transfer_constant(2, 1.0) == 70.0
    assert transfer_constant(3, 2.0) == 2 ** 6 * 3 * 4 + 6


# -- transfers on the flat fixture ----------------------------------------------------------

@pytest.fixture(scope="module")
def flat_transfer():
    c = flat(256)
    fld = constant()
    eps = 0.5 * eps_bar(c, fld, 1, 0)
    return c, fld, eps, transfer(c, fld, 1, 0, eps)


def test_flat_slab_oracle(flat_transfer):
    c, fld, eps, res = flat_transfer
    p = res.plan
    ell = p.n_ell * p.spacing
    assert p.delta == pytest.approx(eps / ell, rel=1e-9)
    assert p.delta_bar == pytest.approx(2 * p.M * eps / ell, rel=1e-12)
    assert p.delta_bar / (4 * p.M ** 2) < p.delta < p.delta_bar
    assert p.ell <= p.a / 8 + 1e-15
    assert res.after.volumes[0] - res.before.volumes[0] == pytest.approx(eps, rel=1e-9)


def test_flat_increment_is_the_lateral_term(flat_transfer):
    _, _, _, res = flat_transfer
    d = res.plan.delta
    # two vertical walls of height delta, everything else unchanged
    assert res.bound.delta_P == pytest.approx(2 * d, rel=1e-9)
    assert res.bound.terms["lateral"]["value"] == pytest.approx(2 * d, rel=1e-9)
    assert res.bound.terms["lateral"]["ok"] and res.bound.passed
    assert all(t["ok"] for t in res.bound.terms.values())


def test_flat_plan_ordering(flat_transfer):
    p = flat_transfer[3].plan
    assert -p.a / 2 < p.sigma_minus < -p.a * p.rho < p.a * p.rho < p.sigma_plus < p.a / 2 - p.delta_bar
    assert p.K_strips == 2 * math.floor(p.a / (6 * p.delta_bar))


def test_transfer_is_local(flat_transfer):
    c, _, _, res = flat_transfer
    mask = changed_cells(c, res.cluster)
    d = np.linalg.norm(c.cell_centers[mask] - np.asarray(res.plan.x_bar), axis=-1)
    assert mask.any() and d.max() < res.plan.radius


def test_volume_map_is_increasing(flat_transfer):
    c, fld, eps, res = flat_transfer
    plan = search_cube(c, fld, 1, 0, eps)
    select_subcube_and_strips(c, plan)
    vmap = _VolumeMap(c, fld, CubeView(c, plan.frame()), plan)
    ds = np.linspace(plan.delta_bar / (4 * plan.M ** 2), plan.delta_bar, 9)
    vals = [vmap(d) for d in ds]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_zero_epsilon_is_identity():
    c = small_flat()
    res = transfer(c, constant(), 1, 0, 0.0)
    assert res.plan.delta == 0.0 and res.bound.delta_P == 0.0 and res.bound.passed
    assert np.array_equal(res.cluster.labels, c.labels)


def test_epsilon_too_large():
    with pytest.raises(EpsilonTooLarge):
        transfer(small_flat(), constant(), 1, 0, 0.1)


def test_antisymmetry():
    c = GridCluster(enclosed_pair(256), spacing=1 / 256)
    fld = constant()
    eps = 0.3 * eps_bar(c, fld, 2, 1)
    a = transfer(c, fld, 2, 1, eps)
    b = transfer(c, fld, 1, 2, -eps)
    assert np.allclose(a.after.volumes, b.after.volumes, rtol=0, atol=1e-15)
    assert a.after.volumes[1] - a.before.volumes[1] == pytest.approx(eps, rel=1e-9)
    assert a.after.volumes[0] - a.before.volumes[0] == pytest.approx(-eps, rel=1e-9)


# -- chains ----------------------------------------------------------------------------

def test_adjacency_graph_on_nested_annuli():
    G = adjacency_graph(nested_annuli())
    assert sorted(map(sorted, G.edges)) == [[0, 3], [1, 2], [2, 3]]


@pytest.fixture(scope="module")
def nested_adjust():
    c = nested_annuli()
    fld = constant()
    eps = 0.5 * min(eps_bar(c, fld, a, b) for a, b in [(1, 2), (2, 3), (3, 0)])
    new, rep = adjust_single_chamber(c, fld, 1, eps)
    return c, fld, eps, new, rep


def test_nested_chain(nested_adjust):
    c, fld, eps, new, rep = nested_adjust
    assert rep.chain == [1, 2, 3, 0]
    before, after = np.array(rep.volumes_before), np.array(rep.volumes_after)
    assert after[0] - before[0] == pytest.approx(eps, rel=1e-9)
    assert abs(after[1] - before[1]) <= 1e-12 * before[1]
    assert abs(after[2] - before[2]) <= 1e-12 * before[2]
    assert len(rep.balls) <= c.m * (c.m + 1) // 2
    assert rep.passed


def test_nested_balls_are_disjoint(nested_adjust):
    rep = nested_adjust[4]
    for k, (x, r) in enumerate(rep.balls):
        for y, s in rep.balls[k + 1:]:
            assert np.linalg.norm(np.subtract(x, y)) >= r + s


def test_per_chamber_requests_compose(nested_adjust):
    c, fld, eps, new, _ = nested_adjust
    newer, _ = adjust_single_chamber(new, fld, 2, -eps)
    vol = weighted_volume(newer, fld) - weighted_volume(c, fld)
    assert vol == pytest.approx([eps, -eps, 0.0], abs=1e-12)


def test_single_chamber_chain():
    c = small_flat()
    fld = constant()
    eps = 0.5 * eps_bar(c, fld, 1, 0)
    new, rep = adjust_single_chamber(c, fld, 1, eps)
    assert rep.chain == [1, 0] and len(rep.transfers) == 1 and rep.passed


def test_disconnected_chamber():
    lab = np.zeros((16, 16), dtype=int)
    lab[4:12, 4:12] = 1
    with pytest.raises(DisconnectedChamber):
        adjust_single_chamber(GridCluster(lab, m=2), constant(), 2, 1e-9)


# -- in-ball adjustment ---------------------------------------------------------------------

def test_ball_with_third_label():
    with pytest.raises(BallNotBiphase):
        adjust_in_ball(quadrants(), constant(), 1, 2, ((0.5, 0.5), 0.2), 1e-4)


def test_in_ball_cap_move():
    c = vertical_split()
    fld = constant()
    ball = ((0.5, 0.5), 0.3)
    new, rep = adjust_in_ball(c, fld, 1, 2, ball, 1e-4)
    assert rep.volumes_after[0] - rep.volumes_before[0] == pytest.approx(1e-4, rel=1e-9)
    assert rep.volumes_after[1] - rep.volumes_before[1] == pytest.approx(-1e-4, rel=1e-9)
    mask = changed_cells(c, new)
    assert np.linalg.norm(c.cell_centers[mask] - 0.5, axis=-1).max() < 0.3
    assert rep.passed and rep.delta_P == pytest.approx(rep.delta_P_symmetrized)


def test_in_ball_symmetrized_density():
    c = vertical_split()
    ball = ((0.5, 0.5), 0.3)
    asym = from_expressions("1", "1 + 0.5*n1", alpha=1.0)
    assert asym.g_symmetric(np.zeros((2, 2)), np.array([[1.0, 0.0], [-1.0, 0.0]])) == pytest.approx([1.0, 1.0])
    a, ra = adjust_in_ball(c, constant(), 1, 2, ball, 1e-4)
    b, rb = adjust_in_ball(c, asym, 1, 2, ball, 1e-4)
    assert np.array_equal(a.labels, b.labels)
    assert rb.delta_P_symmetrized == pytest.approx(ra.delta_P_symmetrized, rel=1e-12, abs=1e-15)
