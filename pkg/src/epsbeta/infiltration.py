"""Radius search around a two-phase point and absorption of the infiltration.

Given ``x`` on the ``(i, j)`` interface, ``G`` is the complement of
``E_i ∪ E_j``. A radius ``r`` is admissible when the part of ``∂B(x, r)``
lying in ``G`` is at most ``1/H`` of the boundary of ``I = G ∩ B(x, r)``. The
infiltration ``I`` is then absorbed into ``E_i`` or ``E_j``, which lowers the
perimeter by at least ``C |F Δ E|^((N-1)/N)``.

Balls are discrete: a cell belongs to ``B(x, r)`` when its centre does, and
``∂B`` is the ring of facets between ball cells and the other cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .density import DensityField, local_bounds
from .errors import CasePartitionFailure, NoValidRadius
from .grid import GridCluster, relabel_cells
from .measures import cluster_perimeter, unit_ball_volume
from .surgery import order_pair

RADII_PER_LEVEL = 16
MIN_RADIUS_CELLS = 3
BOUNDS_PROBES = 4096


def ball_mask(cluster: GridCluster, x, r: float) -> np.ndarray:
    """Cells whose centres lie in the closed ball ``B(x, r)``."""
    return np.linalg.norm(cluster.cell_centers - np.asarray(x, dtype=float), axis=-1) <= r


def _max_radius(cluster: GridCluster, x) -> float:
    """Largest radius keeping the ball one cell away from the grid boundary."""
    x = np.asarray(x, dtype=float)
    lo = np.asarray(cluster.origin)
    hi = lo + np.asarray(cluster.shape) * cluster.spacing
    return float(min(np.min(x - lo), np.min(hi - x))) - cluster.spacing


@dataclass
class _Pieces:
    D: float
    gamma1: float
    gamma2: float
    centers: dict[str, list[np.ndarray]] = field(default_factory=dict)
    normals: dict[str, list[np.ndarray]] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.D + self.gamma1 + self.gamma2


def _boundary_pieces(cluster: GridCluster, I: np.ndarray, B: np.ndarray, i: int, j: int,
                     keep: bool = False) -> _Pieces:
    """Split the facets of ``∂I`` into the ring part ``D`` and the contacts with ``E_i`` and ``E_j``."""
    N, h = cluster.dims, cluster.spacing
    lab = cluster.labels
    area = h ** (N - 1)
    counts = {"D": 0, "gamma1": 0, "gamma2": 0}
    centers = {k: [] for k in counts}
    normals = {k: [] for k in counts}
    for d in range(N):
        lo = [slice(None)] * N
        hi = [slice(None)] * N
        lo[d] = slice(0, -1)
        hi[d] = slice(1, None)
        for src, dst, sign in ((tuple(lo), tuple(hi), 1.0), (tuple(hi), tuple(lo), -1.0)):
            face = I[src] & ~I[dst]
            kinds = {"D": face & ~B[dst], "gamma1": face & B[dst] & (lab[dst] == i),
                     "gamma2": face & B[dst] & (lab[dst] == j)}
            for key, mask in kinds.items():
                counts[key] += int(mask.sum())
                if keep and mask.any():
                    idx = np.argwhere(mask)
                    if sign < 0:
                        idx[:, d] += 1
                    c = cluster.cell_centers[tuple(idx.T)].copy()
                    c[:, d] += sign * h / 2
                    nu = np.zeros((len(idx), N))
                    nu[:, d] = sign
                    centers[key].append(c)
                    normals[key].append(nu)
        # I touching the outermost layer would have facets against the implicit exterior
        edge = np.take(I, [0, -1], axis=d)
        if edge.any():
            raise NoValidRadius("the ball reaches the grid boundary")
    return _Pieces(counts["D"] * area, counts["gamma1"] * area, counts["gamma2"] * area, centers, normals)


def _foreign(cluster: GridCluster, i: int, j: int) -> np.ndarray:
    return ~np.isin(cluster.labels, (i, j))


def radius_passes(cluster: GridCluster, x, r: float, i: int, j: int, H: float) -> tuple[bool, dict]:
    """Test ``area(∂B ∩ G) <= area(∂(G ∩ B)) / H`` for the discrete ball of radius ``r``."""
    B = ball_mask(cluster, x, r)
    I = B & _foreign(cluster, i, j)
    if not I.any():
        return True, {"r": r, "lhs": 0.0, "rhs": 0.0, "empty": True}
    p = _boundary_pieces(cluster, I, B, i, j)
    return p.D <= p.total / H, {"r": r, "lhs": p.D, "rhs": p.total / H, "empty": False}


def density_zero_radius(cluster: GridCluster, x, i: int, j: int, H: float, r_max: float | None = None,
                        trace: list | None = None) -> float:
    """Largest tested radius satisfying the ring condition.

    ``r_bar`` halves from ``r_max`` until ``|G ∩ B(x, r_bar)| <= omega_N r_bar^N / (4H)^N``;
    then 16 radii in ``[r_bar / 2, r_bar]`` are tried from the top.

    Raises:
        NoValidRadius: nothing passes above 3 cells.
    """
    if H < 1:
        raise ValueError("H must be at least 1")
    N, h = cluster.dims, cluster.spacing
    r_bar = _max_radius(cluster, x) if r_max is None else min(r_max, _max_radius(cluster, x))
    G = _foreign(cluster, i, j)
    wN = unit_ball_volume(N)
    vol = h ** N
    while r_bar >= MIN_RADIUS_CELLS * h:
        mass = np.count_nonzero(G & ball_mask(cluster, x, r_bar)) * vol
        small = mass <= wN * r_bar ** N / (4 * H) ** N
        if trace is not None:
            trace.append({"r_bar": r_bar, "mass": mass, "small": bool(small)})
        if small:
            for r in np.linspace(r_bar, r_bar / 2, RADII_PER_LEVEL):
                if r < MIN_RADIUS_CELLS * h:
                    break
                ok, info = radius_passes(cluster, x, float(r), i, j, H)
                if trace is not None:
                    trace.append(info)
                if ok:
                    return float(r)
        r_bar /= 2
    raise NoValidRadius(f"no radius above {MIN_RADIUS_CELLS} cells passes the ring condition at {list(x)}")


@dataclass
class InfiltrationReport:
    """Outcome of one absorption; areas are unweighted, volumes weighted by ``f`` unless stated."""

    center: tuple[float, ...]
    radius: float
    i: int
    j: int
    swapped: bool
    M: float
    H_const: float
    infiltration_volume: float
    infiltration_volume_weighted: float
    D_area: float
    Gamma1_area: float
    Gamma2_area: float
    case_taken: int
    perimeter_before: float
    perimeter_after: float
    perimeter_drop: float
    symmetric_difference_volume: float
    C: float
    bound: float
    no_infiltration: bool = False
    checks: dict[str, bool] = field(default_factory=dict)
    mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return self.no_infiltration or (self.perimeter_drop >= self.bound * (1 - 1e-12) and all(self.checks.values()))

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "mask"}
        d["passed"] = self.passed
        return d


def infiltration_constant(N: int, M: float) -> float:
    """``min`` of the two case constants relating the drop to ``|F Δ E|^((N-1)/N)``."""
    base = N * unit_ball_volume(N) ** (1.0 / N) / (2 * M) ** ((N - 1) / N)
    return min(base / (3 * M), base / (10 * M ** 3))


def _weight(fld: DensityField, centers, normals, a: int, b: int) -> float:
    """Cost per unit area of facets between ``a`` (the normal leaves it) and ``b``, summed."""
    if not centers:
        return 0.0
    c = np.vstack(centers)
    nu = np.vstack(normals)
    if a == 0:
        w = fld.g(c, -nu)
    elif b == 0:
        w = fld.g(c, nu)
    else:
        w = fld.g_symmetric(c, nu)
    return math.fsum(w.tolist())


def infiltrate(cluster: GridCluster, fld: DensityField, x, i: int, j: int, r: float | None = None,
               probes: int = BOUNDS_PROBES, seed: int = 0) -> tuple[GridCluster, InfiltrationReport]:
    """Absorb ``I = B(x, r) \\ (E_i ∪ E_j)`` into ``E_i`` or ``E_j``.

    Args:
        cluster: the cluster.
        fld: densities.
        x: a point of the ``(i, j)`` interface.
        i, j: the two chambers (swapped if needed for the exterior-contact condition).
        r: radius; found by :func:`density_zero_radius` with ``H = 10 M^4`` when omitted.

    Raises:
        ConditionViolated: neither ordering of ``(i, j)`` is admissible.
        NoValidRadius: from the radius search.
        CasePartitionFailure: neither absorption inequality holds.
    """
    x = tuple(float(v) for v in x)
    i, j, swapped = order_pair(cluster, i, j)
    N, h = cluster.dims, cluster.spacing
    M = local_bounds(fld, x, probes, seed).M
    H = 10 * M ** 4
    if r is None:
        r = density_zero_radius(cluster, x, i, j, H)
    B = ball_mask(cluster, x, r)
    I = B & _foreign(cluster, i, j)
    before = cluster_perimeter(cluster, fld)
    C = infiltration_constant(N, M)
    if not I.any():
        rep = InfiltrationReport(x, r, i, j, swapped, M, H, 0.0, 0.0, 0.0, 0.0, 0.0, 0, before.perimeter,
                                 before.perimeter, 0.0, 0.0, C, 0.0, no_infiltration=True, mask=I)
        return cluster, rep
    p = _boundary_pieces(cluster, I, B, i, j, keep=True)
    if p.gamma1 > 2 * M * M * (p.D + p.gamma2):
        case, target = 1, i
    elif p.gamma2 > 2 * M * M * p.D:
        case, target = 2, j
    else:
        raise CasePartitionFailure(
            f"Gamma1 = {p.gamma1:.6g}, Gamma2 = {p.gamma2:.6g}, D = {p.D:.6g} satisfy neither absorption case")
    new = relabel_cells(cluster, I, target)
    after = cluster_perimeter(new, fld)
    fv = fld.f(cluster.cell_centers[I]) * cluster.cell_volume
    old = cluster.labels[I]
    symdiff = math.fsum((fv * ((old != 0).astype(float) + float(target != 0))).tolist())
    drop = before.perimeter - after.perimeter
    checks = {"decomposition": abs(p.total - _boundary_area(cluster, I)) <= 1e-12 * max(1.0, p.total)}
    if case == 1:
        checks["new_boundary_in_D"] = _new_facets_in_ring(cluster, new, B)
    else:
        # the contacts with E_i keep their cost: I becomes j and the other side stays i
        before_cost = _gamma1_cost(fld, p, cluster, i)
        after_cost = _weight(fld, p.centers["gamma1"], p.normals["gamma1"], j, i)
        checks["gamma1_cost_invariant"] = abs(before_cost - after_cost) <= 1e-12 * max(1.0, abs(before_cost))
    rep = InfiltrationReport(
        x, float(r), i, j, swapped, M, H, float(I.sum()) * h ** N, math.fsum(fv.tolist()), p.D, p.gamma1, p.gamma2,
        case, before.perimeter, after.perimeter, drop, symdiff, C, C * symdiff ** ((N - 1) / N), checks=checks, mask=I,
    )
    return new, rep


def _boundary_area(cluster: GridCluster, I: np.ndarray) -> float:
    N = cluster.dims
    count = 0
    for d in range(N):
        count += int(np.count_nonzero(np.diff(I.astype(np.int8), axis=d)))
    return count * cluster.spacing ** (N - 1)


def _gamma1_cost(fld: DensityField, p: _Pieces, cluster: GridCluster, i: int) -> float:
    """Cost of the ``Γ1`` facets in the original cluster, using the label of each ``I`` cell."""
    if not p.centers["gamma1"]:
        return 0.0
    c = np.vstack(p.centers["gamma1"])
    nu = np.vstack(p.normals["gamma1"])
    h = cluster.spacing
    idx = np.floor((c - nu * h / 2 - np.asarray(cluster.origin)) / h).astype(int)
    labs = cluster.labels[tuple(idx.T)]
    return math.fsum(_weight(fld, [c[labs == lab]], [nu[labs == lab]], int(lab), i) for lab in np.unique(labs))


def _new_facets_in_ring(old: GridCluster, new: GridCluster, B: np.ndarray) -> bool:
    """Every facet of the new cluster that was not a facet before lies on the ring of ``B``."""
    N = old.dims
    for d in range(N):
        lo = [slice(None)] * N
        hi = [slice(None)] * N
        lo[d] = slice(0, -1)
        hi[d] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        was = old.labels[lo] != old.labels[hi]
        now = new.labels[lo] != new.labels[hi]
        ring = B[lo] != B[hi]
        if np.any(now & ~was & ~ring):
            return False
    return True
