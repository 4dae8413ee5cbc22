"""Volume transfer between two chambers at a flat interface point.

The pipeline follows the constructive proof of the pairwise transfer:

1. pick an interface point ``x_bar`` and a working cube ``Q^N`` of side ``a``
   in which the cluster is ``rho``-close to ``E_i`` below ``E_j``;
2. collect the good columns ``G`` (one ``i`` run below one ``j`` run);
3. tile ``Q`` with sub-cubes of side ``2 ell`` and keep low-mass ones, pick a
   side-``ell`` cube with little boundary on its walls;
4. select ``Q_eps`` and the strip heights ``sigma_minus``, ``sigma_plus``;
5. stretch, translate and squeeze the grower inside the cylinder
   ``Q_eps x (sigma_minus, sigma_plus + delta)`` and solve for ``delta`` so
   the volume moves by exactly ``epsilon``.

All heights inside a working cube are *relative*: ``z = s * (x_axis - x_bar_axis)``
with ``s = +1`` when the growing chamber lies below ``x_bar``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import networkx as nx
import numpy as np

from .density import DensityField, local_bounds, modulus_of_continuity
from .errors import (
    BallNotBiphase, BallPackingFailure, BisectionBracketFailure, ColumnAxisConflict, ConditionViolated, CubeOutsideGrid,
    DisconnectedChamber, EmptyInterface, EpsilonTooLarge, NoCandidateCube, PerimeterDecreased,
)
from .grid import Box, ColumnProfile, FacetTable, GridCluster, rasterize_profiles, relabel_cells
from .measures import MeasureReport, cluster_perimeter, interface_area, weighted_volume

# geometric constant of the trace condition on the cube boundary (relative to a)
def trace_constant(N: int) -> float:
    return 2.0 ** (N + 1)


MIN_CUBE_CELLS = 8
MAX_CANDIDATES = 32
PROBES = 1024


# -- constants ------------------------------------------------------------------

def transfer_constant(N: int, M: float) -> float:
    """``C = 2^(N+3) N M^2 + 6``."""
    return 2.0 ** (N + 3) * N * M * M + 6.0


def omega_hat(omega_x: float, K: float, N: int, M: float) -> float:
    """``omega_x`` when positive, else ``K^N / C^N``."""
    if omega_x > 0:
        return float(omega_x)
    return (K / transfer_constant(N, M)) ** N


def scale_L(om_hat: float, N: int) -> float:
    return om_hat ** (-1.0 / N)


def rho_choice(om_hat: float, N: int, M: float, m: int) -> float:
    """Half the largest ``rho`` allowed by both smallness conditions."""
    L = scale_L(om_hat, N)
    r1 = om_hat ** (1.0 / N) / (2.0 ** (N + 3) * M * m * L ** (N - 1))
    r2 = 1.0 / (5 * 2.0 ** (N + 1) * (m + 3))
    return 0.5 * min(r1, r2)


def epsilon_bar(a: float, om_hat: float, rho: float, N: int, M: float, m: int) -> float:
    """Largest admissible ``|epsilon|``: ``ell <= a/8`` and the smallness of the ``rho eps^(1/N)/a`` term."""
    L = scale_L(om_hat, N)
    e1 = (a / (8.0 * L)) ** N
    e2 = (a * om_hat ** (1.0 / N) / (2.0 ** (N + 7) * m * M * M * rho)) ** N
    return min(e1, e2)


def subcube_count_bound(a: float, ell: float, N: int) -> float:
    """Lower bound ``a^(N-1) / (2^(N+1) ell^(N-1))`` on the usable sub-cubes of side ``2 ell``."""
    return a ** (N - 1) / (2.0 ** (N + 1) * ell ** (N - 1))


def condition_22(cluster: GridCluster, i: int, j: int) -> bool:
    """``i == 0`` or the ``(i, 0)`` interface has zero area."""
    return i == 0 or interface_area(cluster, i, 0) == 0.0


def order_pair(cluster: GridCluster, i: int, j: int) -> tuple[int, int, bool]:
    """Return ``(i, j, swapped)`` ordered so that the exterior condition holds."""
    if condition_22(cluster, i, j):
        return i, j, False
    if condition_22(cluster, j, i):
        return j, i, True
    raise ConditionViolated(f"neither ({i},{j}) nor ({j},{i}) satisfies the exterior-contact condition")


# -- working cube ------------------------------------------------------------------

@dataclass(frozen=True)
class Frame:
    """A working cube centred on grid vertex ``vertex`` with column axis ``axis``.

    ``orient = +1`` means relative height grows with the absolute coordinate.
    """

    vertex: tuple[int, ...]
    axis: int
    orient: int
    half: int

    @property
    def n(self) -> int:
        return 2 * self.half

    def box(self) -> Box:
        return Box.centered_on_vertex(self.vertex, self.half)

    def lateral_axes(self, N: int) -> list[int]:
        return [d for d in range(N) if d != self.axis]

    def x_bar(self, cluster: GridCluster) -> np.ndarray:
        return cluster.vertex(self.vertex)

    def side(self, cluster: GridCluster) -> float:
        return self.n * cluster.spacing


def _rel_profile(prof: ColumnProfile, zbar: float, orient: int) -> ColumnProfile:
    if orient > 0:
        return ColumnProfile(prof.base, prof.lo - zbar, prof.hi - zbar,
                             tuple(b - zbar for b in prof.breakpoints), prof.labels)
    return ColumnProfile(prof.base, zbar - prof.hi, zbar - prof.lo,
                         tuple(zbar - b for b in reversed(prof.breakpoints)), tuple(reversed(prof.labels)))


def _abs_profile(prof: ColumnProfile, zbar: float, orient: int) -> ColumnProfile:
    if orient > 0:
        return ColumnProfile(prof.base, prof.lo + zbar, prof.hi + zbar,
                             tuple(b + zbar for b in prof.breakpoints), prof.labels)
    return ColumnProfile(prof.base, zbar - prof.hi, zbar - prof.lo,
                         tuple(zbar - b for b in reversed(prof.breakpoints)), tuple(reversed(prof.labels)))


class CubeView:
    """Relative-coordinate view of a cluster inside a working cube.

    Holds the column label array ``cols[(local lateral index) + (k,)]`` from
    bottom to top in relative orientation, exact relative profiles for columns
    with sub-cell data, and the facets lying in the closed cube.
    """

    def __init__(self, cluster: GridCluster, frame: Frame):
        box = frame.box()
        if not box.inside(cluster.shape):
            raise CubeOutsideGrid(f"working cube {box} exceeds the grid")
        self.cluster = cluster
        self.frame = frame
        self.box = box
        N = cluster.dims
        self.N = N
        self.h = h = cluster.spacing
        self.n = frame.n
        self.a = frame.n * h
        self.lat = frame.lateral_axes(N)
        self.xbar = frame.x_bar(cluster)
        self.zbar = float(self.xbar[frame.axis])
        sub = np.moveaxis(cluster.labels[box.slices()], frame.axis, -1)
        self.cols = sub[..., ::-1] if frame.orient < 0 else sub
        self.exact: dict[tuple[int, ...], ColumnProfile] = {}
        if cluster.profiles and cluster.column_axis == frame.axis:
            lo = self.zbar - self.a / 2 if frame.orient > 0 else self.zbar - self.a / 2
            for col, prof in cluster.profiles.items():
                local = tuple(c - box.start[d] for c, d in zip(col, self.lat))
                if all(0 <= q < self.n for q in local):
                    part = prof.restrict(self.zbar - self.a / 2, self.zbar + self.a / 2)
                    self.exact[local] = _rel_profile(part, self.zbar, frame.orient)
        elif cluster.profiles:
            raise ColumnAxisConflict("sub-cell data lies along a different axis than the working cube")
        t = cluster.facets
        tol = 1e-9 * h
        rel = t.center - self.xbar
        inside = np.all(np.abs(rel) <= self.a / 2 + tol, axis=1)
        self.table = t.select(inside)
        rel = rel[inside]
        self.z = frame.orient * rel[:, frame.axis]
        self.lat_coord = rel[:, self.lat]  # relative to x_bar, in length units
        # facets strictly inside the open cube
        self.open = np.all(np.abs(rel) < self.a / 2 - tol, axis=1)
        along = self.table.axis == frame.axis
        lens = np.where(along, 0.0, self.table.area / h ** (N - 2))
        self.z_lo = self.z - lens / 2
        self.z_hi = self.z + lens / 2

    # column helpers --------------------------------------------------------
    def rel_profile(self, local: tuple[int, ...]) -> ColumnProfile:
        if local in self.exact:
            return self.exact[local]
        vals = self.cols[local]
        return ColumnProfile.from_cells(local, vals, -self.a / 2, self.h)

    def global_col(self, local: Sequence[int]) -> tuple[int, ...]:
        return tuple(int(q) + self.box.start[d] for q, d in zip(local, self.lat))

    def facet_columns(self, lo: np.ndarray, hi: np.ndarray, closed: bool = False) -> np.ndarray:
        """Facets whose lateral position lies in local column range ``[lo, hi)`` (cells)."""
        tol = 1e-9 * self.h
        pos = self.lat_coord / self.h + self.n / 2  # local cell units
        if closed:
            ok = (pos >= lo - tol) & (pos <= hi + tol)
        else:
            ok = (pos > lo + tol) & (pos < hi - tol)
        return np.all(ok, axis=1) if ok.ndim == 2 else ok

    def area(self, mask) -> float:
        return math.fsum(self.table.area[mask].tolist())


# -- Step I: flatness -----------------------------------------------------------------

@dataclass
class FlatnessStats:
    """Statistics of a working cube against the flatness thresholds."""

    interface_density_i: float
    interface_density_j: float
    slab_excess: float
    misvolume: float
    foreign_boundary: dict[int, float]
    trace: dict[int, float]
    good_fraction: float
    bad_measure: float = 0.0
    bad_boundary: float = 0.0
    thresholds: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def _good_mask(view: CubeView, i: int, j: int, rho: float) -> np.ndarray:
    """Boolean array over local lateral columns: one ``i`` run below one ``j`` run, interface in ``[-a rho, a rho]``."""
    cols = view.cols
    n, h, a = view.n, view.h, view.a
    change = cols[..., 1:] != cols[..., :-1]
    nchange = change.sum(axis=-1)
    first_j = np.argmax(cols == j, axis=-1)
    y = -a / 2 + first_j * h
    good = (cols[..., 0] == i) & (cols[..., -1] == j) & (nchange == 1) & np.all((cols == i) | (cols == j), axis=-1)
    good &= (y >= -a * rho) & (y <= a * rho)
    for local, prof in view.exact.items():
        ok = prof.labels == (i, j) and -a * rho <= prof.breakpoints[0] <= a * rho
        good[local] = ok
    return good


def _misvolume(view: CubeView, i: int, j: int) -> float:
    h, n = view.h, view.n
    half = n // 2
    cols = view.cols
    bad = np.count_nonzero(cols[..., :half] != i) + np.count_nonzero(cols[..., half:] != j)
    vol = bad * h ** view.N
    for local, prof in view.exact.items():
        raster = cols[local]
        vol -= (np.count_nonzero(raster[:half] != i) + np.count_nonzero(raster[half:] != j)) * h ** view.N
        exact = 0.0
        for lo, hi, lab in prof.segments():
            if lab != i:
                exact += max(0.0, min(hi, 0.0) - lo)
            if lab != j:
                exact += max(0.0, hi - max(lo, 0.0))
        vol += exact * h ** (view.N - 1)
    return vol


def _trace(view: CubeView, label: int) -> float:
    """Area of ``E_label`` on the cube boundary, from the cells lining it."""
    lab = view.cluster.labels[view.box.slices()]
    total = 0
    for d in range(view.N):
        for side in (0, -1):
            total += np.count_nonzero(np.take(lab, side, axis=d) == label)
    return total * view.h ** (view.N - 1)


def cube_stats(view: CubeView, i: int, j: int, rho: float, M: float, m: int, full: bool = True) -> FlatnessStats:
    N, a = view.N, view.a
    t = view.table
    op = view.open
    slab = np.abs(view.z) < a * rho
    ti, tj = t.touching(i), t.touching(j)
    A = a ** (N - 1)
    dens_i = view.area(op & ti & slab) / A
    dens_j = view.area(op & tj & slab) / A
    excess = view.area(op & (ti | tj) & ~slab)
    misvol = _misvolume(view, i, j)
    present = set(np.unique(view.cluster.labels[view.box.slices()]).tolist()) | set(t.inside.tolist()) | set(
        t.outside.tolist())
    foreign = {}
    trace = {}
    for lab in sorted(present - {i, j}):
        foreign[lab] = view.area(op & t.touching(lab))
        trace[lab] = _trace(view, lab)
    good = _good_mask(view, i, j, rho)
    n_cols = good.size
    bad_measure = (n_cols - int(good.sum())) * view.h ** (N - 1)
    C1 = trace_constant(N)
    thr = {
        "density_lo": 1 - rho, "density_hi": 1 + rho, "slab_excess": rho * A, "misvolume": rho ** 3 * a ** N,
        "foreign": rho / (3 * m * M * M) * A, "exterior": rho * A, "trace": C1 * rho ** 3 * A,
        "bad_measure": (m + 4) * rho * A, "bad_boundary": (3 * m + 11) * rho * A,
    }
    fails = []
    if not (1 - rho <= dens_i <= 1 + rho):
        fails.append("interface_density_i")
    if not (1 - rho <= dens_j <= 1 + rho):
        fails.append("interface_density_j")
    if excess > thr["slab_excess"]:
        fails.append("slab_excess")
    if not misvol < thr["misvolume"]:
        fails.append("misvolume")
    for lab, v in foreign.items():
        lim = thr["exterior"] if lab == 0 else thr["foreign"]
        if not v < lim:
            fails.append(f"foreign_{lab}")
    for lab, v in trace.items():
        if v > thr["trace"]:
            fails.append(f"trace_{lab}")
    bad_boundary = _bad_boundary(view, ~good) if full or not fails else math.nan
    stats = FlatnessStats(dens_i, dens_j, excess, misvol, foreign, trace, float(good.mean()) if n_cols else 0.0,
                          bad_measure, bad_boundary, thr, fails)
    return stats


def _bad_boundary(view: CubeView, bad: np.ndarray) -> float:
    """Boundary mass of ``∂E`` over the bad columns (facets on a column wall count if either side is bad)."""
    if not bad.any():
        return 0.0
    op = np.flatnonzero(view.open)
    pos = view.lat_coord[op] / view.h + view.n / 2
    if pos.ndim == 1:
        pos = pos[:, None]
    near = np.round(pos)
    on_wall = np.abs(pos - near) < 1e-9
    idx = np.where(on_wall, near, np.floor(pos)).astype(int)
    left = np.where(on_wall, idx - 1, idx)
    n = view.n

    def lookup(ix):
        ok = np.all((ix >= 0) & (ix < n), axis=1)
        out = np.zeros(len(ix), dtype=bool)
        out[ok] = bad[tuple(np.clip(ix[ok], 0, n - 1).T)]
        return out

    hit = lookup(idx) | lookup(left)
    return math.fsum(view.table.area[op[hit]].tolist())


def flatness_stats(cluster: GridCluster, x_bar, i: int, j: int, a: float, rho: float, axis: int | None = None,
                   M: float = 1.0, orient: int | None = None) -> FlatnessStats:
    """Flatness statistics of the cube of side ``a`` centred at the grid vertex nearest ``x_bar``.

    Args:
        cluster: the cluster.
        x_bar: interface point (snapped to the nearest grid vertex).
        i, j: lower and upper chamber.
        a: cube side, rounded to an even number of cells.
        rho: flatness parameter.
        axis: column axis (defaults to the last axis).
        M: density bound used in the foreign-chamber threshold.
        orient: ``+1`` if ``E_i`` lies below ``x_bar``; detected when omitted.
    """
    frame = _frame_for(cluster, x_bar, a, axis, i, orient)
    view = CubeView(cluster, frame)
    return cube_stats(view, i, j, rho, M, cluster.m)


def _frame_for(cluster, x_bar, a, axis, i, orient) -> Frame:
    axis = cluster.dims - 1 if axis is None else axis
    h = cluster.spacing
    vertex = tuple(int(round(v)) for v in (np.asarray(x_bar, dtype=float) - np.asarray(cluster.origin)) / h)
    half = max(1, int(round(a / h / 2)))
    if orient is None:
        frame = Frame(vertex, axis, 1, half)
        box = frame.box()
        if not box.inside(cluster.shape):
            raise CubeOutsideGrid(f"working cube {box} exceeds the grid")
        sub = np.moveaxis(cluster.labels[box.slices()], axis, -1)
        below = np.count_nonzero(sub[..., :half] == i)
        above = np.count_nonzero(sub[..., half:] == i)
        orient = 1 if below >= above else -1
    return Frame(vertex, axis, orient, half)


def good_set(cluster: GridCluster, x_bar, i: int, j: int, a: float, rho: float, axis: int | None = None,
             M: float = 1.0, orient: int | None = None) -> tuple[set[tuple[int, ...]], FlatnessStats]:
    """Good columns (global lateral indices) of the working cube, with the stats of the cube.

    The stats carry the measure of ``Q \\ G`` and the boundary mass above it;
    violations of their bounds are listed in ``failures`` rather than raised.
    """
    frame = _frame_for(cluster, x_bar, a, axis, i, orient)
    view = CubeView(cluster, frame)
    stats = cube_stats(view, i, j, rho, M, cluster.m)
    mask = _good_mask(view, i, j, rho)
    cols = {view.global_col(loc) for loc in zip(*np.nonzero(mask))}
    if stats.bad_measure > stats.thresholds["bad_measure"]:
        stats.failures.append("bad_measure")
    if stats.bad_boundary > stats.thresholds["bad_boundary"]:
        stats.failures.append("bad_boundary")
    return cols, stats


# -- plan ---------------------------------------------------------------------------

@dataclass
class SurgeryPlan:
    """Geometric choices of one pairwise transfer.

    ``epsilon`` is signed with ``|F_i| = |E_i| + epsilon``. The working cube has
    ``2 * half`` cells per side and is centred on grid vertex ``vertex``; heights
    ``sigma_*`` are relative (see the module docstring). ``Q_eps`` holds the
    local lateral start of the selected sub-cube, ``n_ell`` cells per side.
    """

    x_bar: tuple[float, ...]
    i: int
    j: int
    epsilon: float
    swapped: bool
    condition_22: bool
    axis: int
    orient: int
    vertex: tuple[int, ...]
    half: int
    spacing: float
    a: float
    rho: float
    M: float
    omega_x: float
    omega_bar: float
    omega_hat: float
    K_user: float
    L: float
    eps_bar: float
    rate_mode: bool = False
    seed: int = 0
    ell: float = math.nan
    n_ell: int = 0
    Q_eps: tuple[int, ...] | None = None
    sigma_minus: float = math.nan
    sigma_plus: float = math.nan
    delta_bar: float = math.nan
    delta: float = math.nan
    K_strips: int = 0
    trace: dict = field(default_factory=dict)

    @property
    def grower(self) -> int:
        return self.i if self.epsilon >= 0 else self.j

    @property
    def shrinker(self) -> int:
        return self.j if self.epsilon >= 0 else self.i

    @property
    def n(self) -> int:
        return 2 * self.half

    @property
    def radius(self) -> float:
        """Radius of the ball ``B(x_bar, a sqrt(N) / 2)`` containing every change."""
        return self.a * math.sqrt(len(self.vertex)) / 2

    def frame(self) -> Frame:
        return Frame(self.vertex, self.axis, self.orient, self.half)

    def q_eps_columns(self) -> list[tuple[int, ...]]:
        """Global lateral indices of the columns of ``Q_eps``."""
        if self.Q_eps is None:
            return []
        lat = [d for d in range(len(self.vertex)) if d != self.axis]
        start = [self.vertex[d] - self.half + q for d, q in zip(lat, self.Q_eps)]
        return list(itertools.product(*[range(s, s + self.n_ell) for s in start]))

    def to_dict(self, trace: bool = False) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "trace"}
        d["grower"] = self.grower
        d["shrinker"] = self.shrinker
        d["radius"] = self.radius
        d["K_per"] = transfer_constant(len(self.vertex), self.M) * self.omega_hat ** (1.0 / len(self.vertex))
        if trace:
            d["trace"] = self.trace
        return d


def _cube_sizes(n_max: int) -> list[int]:
    """Even sizes from ``n_max`` down by halving, 8 per octave, at least ``MIN_CUBE_CELLS``."""
    out: set[int] = set()
    top = n_max
    while top >= MIN_CUBE_CELLS:
        for k in range(8, 0, -1):
            s = 2 * int((top / 2 + k * top / 16) // 2)
            if MIN_CUBE_CELLS <= s <= n_max:
                out.add(s)
        top //= 2
    return sorted(out, reverse=True)


def _facet_vertex(table: FacetTable, k: int, cluster: GridCluster) -> tuple[int, ...]:
    """Grid vertex at the lower lateral corner of facet ``k``."""
    v = (table.center[k] - np.asarray(cluster.origin)) / cluster.spacing
    lat = np.arange(cluster.dims) != table.axis[k]
    v[lat] -= 0.5
    return tuple(int(round(x)) for x in v)


def _room(cluster: GridCluster, vertex, x: np.ndarray, excluded, max_radius) -> int:
    """Largest even cube size (cells) centred on ``vertex`` fitting all constraints."""
    N, h = cluster.dims, cluster.spacing
    n = 2 * min(min(v, s - v) for v, s in zip(vertex, cluster.shape))
    for c, r in excluded:
        gap = float(np.linalg.norm(x - np.asarray(c, dtype=float))) - r
        n = min(n, 2 * int(math.floor(gap / (math.sqrt(N) * h) * (1 - 1e-12))))
    if max_radius is not None:
        n = min(n, 2 * int(math.floor(max_radius / (math.sqrt(N) * h) * (1 + 1e-12))))
    return n - n % 2


def _eps_fit(a: float, h: float, n: int, eps: float, om_hat: float, rho: float, N: int, M: float,
             m: int) -> tuple[list[str], dict]:
    """Admissibility of ``eps`` on a cube of side ``a``."""
    L = scale_L(om_hat, N)
    eb = epsilon_bar(a, om_hat, rho, N, M, m)
    ell_raw = L * abs(eps) ** (1.0 / N)
    # snapping to whole cells must not push ell past a/8 when the exact ell fits
    n_ell = max(1, min(int(round(ell_raw / h)), n // 8))
    ell = n_ell * h
    dbar = 2 * M * abs(eps) / ell ** (N - 1)
    K = 2 * int(math.floor(a / (6 * dbar))) if dbar > 0 else 0
    info = {"eps_bar": eb, "ell_raw": ell_raw, "n_ell": n_ell, "ell": ell, "delta_bar": dbar, "K_strips": K, "L": L}
    fails = []
    if not abs(eps) < eb:
        fails.append("eps>=eps_bar")
    if ell_raw > a / 8 or n_ell > n // 8:
        fails.append("ell>a/8")
    if dbar > 0 and K < 2:
        fails.append("K_strips<2")
    return fails, info


def search_cube(cluster: GridCluster, fld: DensityField, i: int, j: int, epsilon: float, K: float = 1.0,
                excluded: Sequence[tuple[Sequence[float], float]] = (), max_radius: float | None = None,
                rate_mode: bool = False, seed: int = 0, probes: int = PROBES,
                max_candidates: int = MAX_CANDIDATES, cube_cells: int | None = None,
                degenerate: bool = True) -> SurgeryPlan:
    """Choose ``x_bar`` and the largest working cube passing every Step I-III test.

    Candidate points are up to ``max_candidates`` evenly spaced ``(i, j)``
    facets. Sizes shrink by dyadic halving with 8 sizes per octave; a size is
    only tried if it beats the best cube found so far. When no cube passes,
    the degenerate absorption moves are tried (see :func:`degenerate_moves`).

    Raises:
        EmptyInterface: no ``(i, j)`` facet.
        ConditionViolated: neither ordering satisfies the exterior-contact condition.
        EpsilonTooLarge: some cube is flat enough but ``epsilon`` does not fit.
        BallPackingFailure: the excluded balls leave no room for a cube.
        PerimeterDecreased: a degenerate absorption strictly lowers the perimeter.
        NoCandidateCube: otherwise.
    """
    t = cluster.facets
    sel = np.flatnonzero(t.between(i, j))
    if not len(sel):
        raise EmptyInterface(f"no facet between chambers {i} and {j}")
    i, j, swapped = order_pair(cluster, i, j)
    if cluster.profiles:
        # sub-cell data lives along one axis only, so later cubes must share it
        sel = sel[t.axis[sel] == cluster.column_axis]
        if not len(sel):
            raise ColumnAxisConflict(f"no ({i},{j}) facet normal to the sub-cell axis {cluster.column_axis}")
    eps = -epsilon if swapped else epsilon
    grower, shrinker = (i, j) if eps >= 0 else (j, i)
    if len(sel) > max_candidates:
        pick = np.unique(np.round(np.linspace(0, len(sel) - 1, max_candidates)).astype(int))
        sel = sel[pick]
    N, h, m = cluster.dims, cluster.spacing, cluster.m
    best: SurgeryPlan | None = None
    best_n = 0
    any_room = False
    eps_blocked: dict | None = None
    degenerate_at: tuple[int, Frame, float, float] | None = None
    bounds_cache: dict[tuple[int, ...], Any] = {}
    attempts = []
    for k in sel:
        vertex = _facet_vertex(t, k, cluster)
        x = cluster.vertex(vertex)
        n_max = _room(cluster, vertex, x, excluded, max_radius)
        if n_max < MIN_CUBE_CELLS:
            continue
        any_room = True
        sizes = [cube_cells] if cube_cells is not None else _cube_sizes(n_max)
        sizes = [s for s in sizes if s > best_n and s <= n_max]
        if not sizes:
            continue
        orient = int(t.sign[k]) if t.inside[k] == grower else -int(t.sign[k])
        if vertex not in bounds_cache:
            bounds_cache[vertex] = local_bounds(fld, x, probes, seed)
        lb = bounds_cache[vertex]
        M = lb.M
        for n in sizes:
            a = n * h
            frame = Frame(vertex, int(t.axis[k]), orient, n // 2)
            view = CubeView(cluster, frame)
            om_bar = modulus_of_continuity(fld, x, a * math.sqrt(N) / 2, probes, seed) if rate_mode else None
            om_hat = omega_hat(om_bar if rate_mode else lb.omega_limit, K, N, M)
            rho = rho_choice(om_hat, N, M, m)
            stats = cube_stats(view, grower, shrinker, rho, M, m, full=False)
            if stats.bad_measure > stats.thresholds["bad_measure"]:
                stats.failures.append("bad_measure")
            if stats.bad_boundary > stats.thresholds["bad_boundary"]:
                stats.failures.append("bad_boundary")
            if not rate_mode and not stats.failures:
                # the oscillation test is the expensive one, so it runs last
                om_bar = modulus_of_continuity(fld, x, a * math.sqrt(N) / 2, probes, seed)
                if not om_bar < 2 * om_hat:
                    stats.failures.append("omega")
            attempt = {"vertex": list(vertex), "n": n, "rho": rho, "failures": list(stats.failures)}
            attempts.append(attempt)
            if stats.failures:
                soft = {"bad_measure", "bad_boundary"}
                if degenerate_at is None and all(f.startswith("foreign_") or f in soft for f in stats.failures):
                    degenerate_at = (n, frame, rho, M)
                continue
            fails, info = _eps_fit(a, h, n, eps, om_hat, rho, N, M, m)
            if fails:
                attempt["failures"] = fails
                if eps_blocked is None or n > eps_blocked["n"]:
                    eps_blocked = {"n": n, **info, "failures": fails}
                continue
            best_n = n
            best = SurgeryPlan(
                x_bar=tuple(map(float, x)), i=i, j=j, epsilon=eps, swapped=swapped,
                condition_22=condition_22(cluster, i, j), axis=frame.axis, orient=orient, vertex=vertex,
                half=n // 2, spacing=h, a=a, rho=rho, M=M, omega_x=lb.omega_limit, omega_bar=om_bar,
                omega_hat=om_hat, K_user=K, L=info["L"], eps_bar=info["eps_bar"], rate_mode=rate_mode, seed=seed,
                trace={"flatness": stats.to_dict(), "local_bounds": lb.to_dict()},
            )
            break
    if best is not None:
        best.trace["attempts"] = len(attempts)
        return best
    if not any_room:
        if excluded or max_radius is not None:
            raise BallPackingFailure("no working cube fits outside the excluded balls")
        raise NoCandidateCube("no interface point admits a cube of at least 8 cells")
    if eps_blocked is not None:
        raise EpsilonTooLarge(f"|epsilon| = {abs(epsilon):.6g} does not fit any flat cube: {eps_blocked}")
    if degenerate and degenerate_at is not None:
        n, frame, rho, M = degenerate_at
        degenerate_moves(cluster, fld, frame, grower, shrinker, rho, M)
    raise NoCandidateCube(f"none of {len(attempts)} working cubes passed the flatness tests")


def find_interface_point(cluster: GridCluster, i: int, j: int, fld: DensityField | None = None,
                         epsilon: float = 0.0, **search) -> np.ndarray:
    """Interface point ``x_bar`` (a grid vertex on an ``(i, j)`` facet) with the largest flat cube."""
    from .density import constant
    plan = search_cube(cluster, fld or constant(), i, j, epsilon, **search)
    return np.asarray(plan.x_bar)


# -- degenerate branches --------------------------------------------------------------

def degenerate_moves(cluster: GridCluster, fld: DensityField, frame: Frame, i: int, j: int, rho: float,
                     M: float) -> None:
    """Try the absorption moves on a cube whose only defects are foreign chambers.

    For a foreign chamber ``n`` with ``Omega = E_n ∩ Q`` the moves are
    ``Omega -> 0`` and ``Omega -> l`` for each chamber ``l`` touching ``Omega``;
    for the exterior (when ``0`` is not one of ``i, j``) the move is
    ``E_0 ∩ Q -> j``. The move with the largest strict perimeter drop is raised
    as :class:`PerimeterDecreased`; nothing is raised when no move helps.
    """
    box = frame.box()
    base = cluster_perimeter(cluster, fld, volumes=False).perimeter
    inside = np.zeros(cluster.shape, dtype=bool)
    inside[box.slices()] = True
    sub = cluster.labels[box.slices()]
    moves = []
    t = cluster.facets
    for n in sorted(set(np.unique(sub).tolist()) - {i, j}):
        omega = inside & (cluster.labels == n)
        if n == 0:
            moves.append((f"exterior->{j}", omega, j))
            continue
        moves.append((f"{n}->0", omega, 0))
        for lab in sorted(set(t.outside[t.inside == n].tolist()) | set(t.inside[t.outside == n].tolist())):
            if lab not in (0, n):
                moves.append((f"{n}->{lab}", omega, lab))
    best = None
    for name, mask, lab in moves:
        new = relabel_cells(cluster, mask, lab)
        drop = base - cluster_perimeter(new, fld, volumes=False).perimeter
        if drop > 0 and (best is None or drop > best[0]):
            best = (drop, name, new)
    if best is not None:
        drop, name, new = best
        raise PerimeterDecreased(f"absorption {name} lowers the perimeter by {drop:.6g}", cluster=new,
                                 drop=drop, move=name)


# -- Steps IV-VI ----------------------------------------------------------------------

def _lateral_mask(view: CubeView, start: Sequence[int], size: int, mode: str) -> np.ndarray:
    """Facets over the lateral square ``[start, start + size)`` (local cells).

    ``mode`` is ``"open"`` (strictly inside), ``"closed"`` or ``"wall"`` (on
    its boundary, within the closed square).
    """
    tol = 1e-9
    pos = view.lat_coord / view.h + view.n / 2
    lo = np.asarray(start, dtype=float)
    hi = lo + size
    if pos.ndim == 1:
        pos = pos[:, None]
    strict = np.all((pos > lo + tol) & (pos < hi - tol), axis=1)
    closed = np.all((pos >= lo - tol) & (pos <= hi + tol), axis=1)
    if mode == "open":
        return strict
    if mode == "closed":
        return closed
    return closed & ~strict


def _z_overlap(view: CubeView, lo: float, hi: float, closed: bool = True) -> np.ndarray:
    """Per-facet area inside the height range ``[lo, hi]`` (``(lo, hi)`` when ``closed`` is false)."""
    t = view.table
    horiz = t.axis == view.frame.axis
    if closed:
        hz = (view.z >= lo) & (view.z <= hi)
    else:
        hz = (view.z > lo) & (view.z < hi)
    length = np.clip(np.minimum(view.z_hi, hi) - np.maximum(view.z_lo, lo), 0.0, None)
    lat_area = length * view.h ** (view.N - 2)
    return np.where(horiz, np.where(hz, t.area, 0.0), lat_area)


def _breakpoint_sets(view: CubeView) -> dict[tuple[int, ...], frozenset]:
    cols = view.cols
    change = cols[..., 1:] != cols[..., :-1]
    out = {}
    for loc in itertools.product(range(view.n), repeat=view.N - 1):
        ks = np.flatnonzero(change[loc]) + 1
        out[loc] = frozenset(np.round(-view.a / 2 + ks * view.h, 12).tolist())
    for loc, prof in view.exact.items():
        out[loc] = frozenset(np.round(prof.breakpoints, 12).tolist())
    return out


def _wall_mass(bps, start: Sequence[int], size: int, h: float, N: int) -> float:
    """``h^(N-2)`` times the distinct breakpoint heights along each column pair across ``∂Q_h``."""
    total = 0
    dims = len(start)
    for q in range(dims):
        others = [range(start[p], start[p] + size) for p in range(dims) if p != q]
        for inner, outer in ((start[q], start[q] - 1), (start[q] + size - 1, start[q] + size)):
            for rest in itertools.product(*others):
                a = list(rest)
                a.insert(q, inner)
                b = list(rest)
                b.insert(q, outer)
                total += len(bps[tuple(a)] | bps[tuple(b)])
    return total * h ** (N - 2)


def select_subcube_and_strips(cluster: GridCluster, plan: SurgeryPlan, epsilon: float | None = None) -> SurgeryPlan:
    """Fill in ``ell``, ``Q_eps``, ``sigma_minus``, ``sigma_plus``, ``delta_bar`` and ``K_strips``.

    ``epsilon`` follows the plan's convention (``|F_i| = |E_i| + epsilon``);
    it defaults to ``plan.epsilon``.

    Raises:
        EpsilonTooLarge: ``ell > a / 8`` or fewer than two strips.
        NoCandidateCube: no sub-cube, strip or lower section meets its budget.
    """
    eps = plan.epsilon if epsilon is None else epsilon
    if eps != plan.epsilon:
        plan.epsilon = eps
    view = CubeView(cluster, plan.frame())
    N, h, n, a = view.N, view.h, view.n, view.a
    m, M, rho = cluster.m, plan.M, plan.rho
    i, j = plan.grower, plan.shrinker
    fails, info = _eps_fit(a, h, n, eps, plan.omega_hat, rho, N, M, m)
    if fails:
        raise EpsilonTooLarge(f"|epsilon| = {abs(eps):.6g} too large for a = {a:.6g}: {', '.join(fails)}")
    n_ell, ell, dbar, K = info["n_ell"], info["ell"], info["delta_bar"], info["K_strips"]
    plan.ell, plan.n_ell, plan.delta_bar, plan.K_strips, plan.eps_bar = ell, n_ell, dbar, K, info["eps_bar"]
    D = N - 1
    # Step IV: tiles of side 2 ell, compactly inside Q
    k = (n - 2) // (2 * n_ell)
    if k < 1:
        raise EpsilonTooLarge("no room for a sub-cube of side 2 ell")
    m0 = (n - 2 * k * n_ell) // 2
    tiles = [tuple(m0 + 2 * n_ell * q for q in idx) for idx in itertools.product(range(k), repeat=D)]
    H = math.ceil(len(tiles) / 2)
    H_bound = subcube_count_bound(a, ell, N)
    op = view.open
    tile_cap = 2 * a ** D / H
    kept = []
    for s in tiles:
        mass = view.area(op & _lateral_mask(view, s, 2 * n_ell, "open"))
        if mass < tile_cap:
            kept.append(s)
    centre = (n - 2 * n_ell) / 2
    kept.sort(key=lambda s: (sum((q - centre) ** 2 for q in s), s))
    bps = _breakpoint_sets(view)
    good = _good_mask(view, i, j, rho)
    slab = np.abs(view.z) < a * rho
    foreign = ~(np.isin(view.table.inside, (i, j)) & np.isin(view.table.outside, (i, j)))
    theta = op & (~slab | foreign)
    wall_cap = 2.0 ** (N + 2) * (N - 1) * ell ** (N - 2)
    caps = {"2.18": 1 + 5 * 2.0 ** (N + 1) * (m + 3) * rho, "2.19": 3 * 2.0 ** (N + 1) * m * rho,
            "2.20": 3 * 2.0 ** (N + 1) * (m + 4) * rho}
    chosen = None
    tried = []
    for s in kept:
        # Step IV: offset inside the tile with the least boundary on the walls
        offs = []
        for o in itertools.product(range(n_ell + 1), repeat=D):
            start = tuple(q + p for q, p in zip(s, o))
            offs.append((_wall_mass(bps, start, n_ell, h, N), start))
        wall, start = min(offs)
        lat = _lateral_mask(view, start, n_ell, "open")
        vals = {
            "2.18": view.area(op & lat) / ell ** D,
            "2.19": view.area(theta & lat) / ell ** D,
            "2.20": float((~good[tuple(slice(q, q + n_ell) for q in start)]).sum()) * h ** D / ell ** D,
        }
        ok = all(vals[key] <= caps[key] for key in caps) and wall <= wall_cap
        tried.append({"start": list(start), "wall": wall, **vals, "ok": ok})
        if ok:
            chosen = (start, wall, vals)
            break
    if chosen is None:
        raise NoCandidateCube(f"none of {len(kept)} sub-cubes meets the Step V budgets")
    start, wall, vals = chosen
    plan.Q_eps = tuple(int(q) for q in start)
    # Step VI: strip S+ above the slab
    step = (a / 2 - dbar - a * rho) / K
    closed = _lateral_mask(view, start, n_ell, "closed")
    strip_cap = 3 * 2.0 ** (N + 1) * m * rho * ell ** D / K
    sigma_plus = None
    strip_mass = None
    for kk in range(1, K + 1):
        s_k = a * rho + (kk - 1) * step + (step - dbar) / 2
        mass = math.fsum(_z_overlap(view, s_k, s_k + dbar)[closed].tolist())
        if mass <= strip_cap:
            sigma_plus, strip_mass = s_k, mass
            break
    if sigma_plus is None:
        raise NoCandidateCube("no strip above the slab meets its boundary budget")
    # lower section sigma_minus: a cell-centre height below the slab with a small section
    lat_open = _lateral_mask(view, start, n_ell, "open")
    side = op & lat_open & (view.table.axis != plan.axis)
    qcols = [tuple(start[p] + c[p] for p in range(D)) for c in itertools.product(range(n_ell), repeat=D)]
    exact_bps = np.array(sorted(set().union(*[bps[c] for c in qcols]))) if qcols else np.zeros(0)
    sec_cap = 2.0 ** (N + 4) * m * rho * ell ** D / a
    sigma_minus = None
    section = None
    for kc in range(n // 2 - 1, -1, -1):
        zc = -a / 2 + (kc + 0.5) * h
        if not zc < -a * rho:
            continue
        if len(exact_bps) and np.min(np.abs(exact_bps - zc)) <= 1e-9 * h:
            continue
        cross = np.count_nonzero(side & (view.z_lo < zc) & (view.z_hi > zc)) * h ** (N - 2)
        if cross <= sec_cap:
            sigma_minus, section = zc, cross
            break
    if sigma_minus is None:
        raise NoCandidateCube("no lower section below the slab meets its budget")
    plan.sigma_plus, plan.sigma_minus = float(sigma_plus), float(sigma_minus)
    plan.trace.update({
        "tiles": {"count": len(tiles), "H": H, "H_bound": H_bound, "H_ok": H >= H_bound, "kept": len(kept),
                  "mass_cap": tile_cap},
        "Q_eps": {"start": list(start), "wall_mass": wall, "wall_cap": wall_cap, "values": vals, "caps": caps,
                  "tried": len(tried)},
        "strip": {"sigma_plus": sigma_plus, "mass": strip_mass, "cap": strip_cap, "K_strips": K, "step": step},
        "section": {"sigma_minus": sigma_minus, "value": section, "cap": sec_cap},
    })
    return plan


# -- Step VII: the modified cluster ---------------------------------------------------

def moved_profile(prof: ColumnProfile, grower: int, shrinker: int, sigma_minus: float, sigma_plus: float,
                  delta: float) -> ColumnProfile:
    """Relative column profile after stretching, translating and squeezing by ``delta``.

    Inside ``(sigma_minus, sigma_plus + delta)`` a point of ``E_grower ∪ E_shrinker``
    becomes ``grower`` iff its source (``sigma_minus`` in the stretched band,
    ``t - delta`` above it) was ``grower``; other labels are untouched.
    """
    if delta == 0:
        return prof
    bps = prof.breakpoints
    cuts = {sigma_minus, sigma_minus + delta, sigma_plus + delta, *bps, *(b + delta for b in bps)}
    cuts = sorted(c for c in cuts if prof.lo < c < prof.hi)
    edges = [prof.lo, *cuts, prof.hi]
    mids = 0.5 * (np.asarray(edges[:-1]) + np.asarray(edges[1:]))
    orig = prof.label_at(mids)
    src = np.where(mids < sigma_minus + delta, sigma_minus, mids - delta)
    moved = np.where(prof.label_at(src) == grower, grower, shrinker)
    active = np.isin(orig, (grower, shrinker)) & (mids > sigma_minus) & (mids < sigma_plus + delta)
    labels = np.where(active, moved, orig)
    return ColumnProfile.normalized(prof.base, prof.lo, prof.hi, cuts, labels.tolist())


class _VolumeMap:
    """``delta -> |F_grower,delta| - |E_grower|`` with the midpoint rule used for volumes."""

    def __init__(self, cluster: GridCluster, fld: DensityField, view: CubeView, plan: SurgeryPlan):
        self.plan = plan
        h, N, n = view.h, view.N, view.n
        self.edges = -view.a / 2 + np.arange(n + 1) * h
        self.cols = []
        start = plan.Q_eps
        for c in itertools.product(range(plan.n_ell), repeat=N - 1):
            loc = tuple(s + q for s, q in zip(start, c))
            prof = view.rel_profile(loc)
            gcol = view.global_col(loc)
            idx = [cluster.full_index(gcol, view.box.start[plan.axis] + kk, plan.axis) for kk in range(n)]
            fv = fld.f(cluster.cell_centers[tuple(np.array(idx).T)]) * h ** (N - 1)
            if plan.orient < 0:
                fv = fv[::-1]
            self.cols.append((loc, gcol, prof, fv, prof.occupancy(self.edges, plan.grower)))

    def profiles(self, delta: float) -> list[ColumnProfile]:
        p = self.plan
        return [moved_profile(prof, p.grower, p.shrinker, p.sigma_minus, p.sigma_plus, delta)
                for _, _, prof, _, _ in self.cols]

    def __call__(self, delta: float) -> float:
        total = []
        for new, (_, _, _, fv, occ0) in zip(self.profiles(delta), self.cols):
            total.extend((fv * (new.occupancy(self.edges, self.plan.grower) - occ0)).tolist())
        return math.fsum(total)


def solve_delta(vmap, target: float, lo: float, hi: float, iterations: int = 200) -> float:
    """Bisection on a nondecreasing map, finished by a secant step on the final bracket."""
    v_lo, v_hi = vmap(lo), vmap(hi)
    if not (v_lo < target < v_hi):
        raise BisectionBracketFailure(
            f"volume map does not straddle {target:.6g} on [{lo:.6g}, {hi:.6g}]: values {v_lo:.6g}, {v_hi:.6g}")
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        v = vmap(mid)
        if v == target:
            return mid
        if v < target:
            lo, v_lo = mid, v
        else:
            hi, v_hi = mid, v
        if hi - lo <= 1e-13 * hi:
            break
    # the map is piecewise linear, so one secant step on a tiny bracket is exact
    d = lo + (target - v_lo) * (hi - lo) / (v_hi - v_lo)
    return float(min(max(d, lo), hi))


def _write_back(cluster: GridCluster, view: CubeView, plan: SurgeryPlan, rel_profiles) -> GridCluster:
    box = view.box
    start = list(box.start)
    stop = list(box.stop)
    lat = view.lat
    for d, q in zip(lat, plan.Q_eps):
        start[d] = box.start[d] + q
        stop[d] = start[d] + plan.n_ell
    cyl = Box(tuple(start), tuple(stop))
    zlo = view.zbar - view.a / 2
    profs = {}
    for (loc, gcol, *_), rel in zip(view_cols(view, plan), rel_profiles):
        ab = _abs_profile(rel, view.zbar, plan.orient)
        profs[gcol] = ColumnProfile(gcol, zlo, zlo + view.a, ab.breakpoints, ab.labels)
    return rasterize_profiles(profs, cluster, cyl, plan.axis)


def view_cols(view: CubeView, plan: SurgeryPlan):
    for c in itertools.product(range(plan.n_ell), repeat=view.N - 1):
        loc = tuple(s + q for s, q in zip(plan.Q_eps, c))
        yield loc, view.global_col(loc)


def transfer_volume(cluster: GridCluster, fld: DensityField, plan: SurgeryPlan, epsilon: float | None = None
                    ) -> tuple[GridCluster, SurgeryPlan, MeasureReport, MeasureReport]:
    """Apply the transfer of ``plan`` and solve for ``delta``.

    Returns the new cluster, the plan with ``delta`` filled in, and the
    measures before and after.

    Raises:
        BisectionBracketFailure: the bracket ``(delta_bar / (4 M^2), delta_bar)`` misses the target.
    """
    eps = plan.epsilon if epsilon is None else epsilon
    before = cluster_perimeter(cluster, fld)
    if eps == 0:
        plan.delta = 0.0
        return cluster, plan, before, before
    if plan.Q_eps is None or eps != plan.epsilon:
        select_subcube_and_strips(cluster, plan, eps)
    view = CubeView(cluster, plan.frame())
    vmap = _VolumeMap(cluster, fld, view, plan)
    target = abs(eps)
    lo, hi = plan.delta_bar / (4 * plan.M ** 2), plan.delta_bar
    delta = solve_delta(vmap, target, lo, hi)
    plan.delta = delta
    new = _write_back(cluster, view, plan, vmap.profiles(delta))
    after = cluster_perimeter(new, fld)
    g, s = plan.grower - 1, plan.shrinker - 1
    plan.trace["volume"] = {
        "target": target, "solved": vmap(delta), "bracket": [lo, hi],
        "grower_change": float(after.volumes[g] - before.volumes[g]) if g >= 0 else None,
        "shrinker_change": float(after.volumes[s] - before.volumes[s]) if s >= 0 else None,
    }
    return new, plan, before, after


# -- Step VIII: perimeter bound -------------------------------------------------------

@dataclass
class BoundReport:
    """Perimeter increment against ``K |epsilon|^((N-1)/N)`` with every partial term and its budget."""

    delta_P: float
    K_required: float
    rhs: float
    C: float
    omega_hat: float
    terms: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.delta_P <= self.rhs * (1 + 1e-12) + 1e-15

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def _term(value: float, budget: float) -> dict[str, float]:
    return {"value": float(value), "budget": float(budget), "ok": bool(value <= budget * (1 + 1e-12) + 1e-15)}


def verify_transfer_bound(before: MeasureReport, after: MeasureReport, epsilon: float, fld: DensityField,
                          plan: SurgeryPlan, cluster_before: GridCluster | None = None,
                          cluster_after: GridCluster | None = None) -> BoundReport:
    """Check ``P(F) - P(E) <= C omega_hat^(1/N) |epsilon|^((N-1)/N)``.

    With both clusters given, the six partial terms (foreign facets, lower
    band, top lid, translated interface, lateral walls, and the total) are
    reported against their budgets.
    """
    N = len(plan.vertex)
    M = plan.M
    C = transfer_constant(N, M)
    K_req = C * plan.omega_hat ** (1.0 / N)
    rhs = K_req * abs(epsilon) ** ((N - 1) / N)
    dP = after.perimeter - before.perimeter
    rep = BoundReport(dP, K_req, rhs, C, plan.omega_hat)
    rep.terms["total"] = _term(dP, rhs)
    if epsilon == 0 or cluster_before is None or cluster_after is None or plan.Q_eps is None:
        return rep
    m, rho, ell, a = cluster_before.m, plan.rho, plan.ell, plan.a
    d, dbar, sm, sp = plan.delta, plan.delta_bar, plan.sigma_minus, plan.sigma_plus
    i, j = plan.grower, plan.shrinker
    vE = CubeView(cluster_before, plan.frame())
    vF = CubeView(cluster_after, plan.frame())
    D = N - 1

    def pieces(view):
        t = view.table
        pair = np.isin(t.inside, (i, j)) & np.isin(t.outside, (i, j))
        w = facet_weights_for(view, fld)
        return t, pair, w

    tE, pairE, wE = pieces(vE)
    tF, pairF, wF = pieces(vF)
    openE = _lateral_mask(vE, plan.Q_eps, plan.n_ell, "open")
    openF = _lateral_mask(vF, plan.Q_eps, plan.n_ell, "open")
    closedE = _lateral_mask(vE, plan.Q_eps, plan.n_ell, "closed")
    wallF = _lateral_mask(vF, plan.Q_eps, plan.n_ell, "wall")
    gamma = math.fsum(_z_overlap(vE, sm, sp + d)[closedE & ~pairE].tolist())
    rep.terms["foreign"] = _term(M * gamma, 3 * 2.0 ** (N + 1) * M * m * rho * ell ** D)
    horizF = tF.axis == plan.axis
    band = _z_overlap(vF, sm, sm + d)
    band = np.where(horizF & (np.abs(vF.z - sm) <= 1e-12 * vF.h), 0.0, band)  # half-open at the bottom
    rep.terms["bottom"] = _term(math.fsum((band * wF)[openF & pairF].tolist()),
                                2.0 ** (N + 4) * m * M * d * rho * ell ** D / a)
    lid = horizF & (np.abs(vF.z - (sp + d)) <= 1e-9 * vF.h)
    rep.terms["top"] = _term(math.fsum((tF.area * wF)[openF & pairF & lid].tolist()),
                             5 * 2.0 ** (N + 2) * m * M * rho * ell ** D * dbar / a)
    inner_F = _z_overlap(vF, sm + d, sp + d, closed=False)
    inner_E = _z_overlap(vE, sm, sp, closed=False)
    lhs = math.fsum((inner_F * wF)[openF & pairF].tolist())
    base = math.fsum((inner_E * wE)[openE & pairE].tolist())
    rep.terms["interior"] = _term(lhs, base + plan.omega_bar * (1 + 5 * 2.0 ** (N + 1) * (m + 3) * rho) * ell ** D)
    lat = math.fsum(_z_overlap(vF, sm, sp + d, closed=False)[wallF & pairF & ~horizF].tolist())
    rep.terms["lateral"] = _term(lat, 2.0 ** (N + 2) * (N - 1) * ell ** (N - 2) * d)
    return rep


def facet_weights_for(view: CubeView, fld: DensityField) -> np.ndarray:
    from .measures import facet_weights
    return facet_weights(view.table, fld)


@dataclass
class TransferResult:
    cluster: GridCluster
    plan: SurgeryPlan
    before: MeasureReport
    after: MeasureReport
    bound: BoundReport

    def to_dict(self, trace: bool = False) -> dict:
        return {"plan": self.plan.to_dict(trace), "before": self.before.to_dict(), "after": self.after.to_dict(),
                "bound": self.bound.to_dict()}


def transfer(cluster: GridCluster, fld: DensityField, i: int, j: int, epsilon: float, **search) -> TransferResult:
    """Move volume ``epsilon`` from chamber ``j`` to chamber ``i`` (Steps I-VIII)."""
    if epsilon == 0:
        rep = cluster_perimeter(cluster, fld)
        plan = search_cube(cluster, fld, i, j, 0.0, **search)
        plan.delta = 0.0
        return TransferResult(cluster, plan, rep, rep, verify_transfer_bound(rep, rep, 0.0, fld, plan))
    plan = search_cube(cluster, fld, i, j, epsilon, **search)
    select_subcube_and_strips(cluster, plan)
    new, plan, before, after = transfer_volume(cluster, fld, plan)
    bound = verify_transfer_bound(before, after, plan.epsilon, fld, plan, cluster, new)
    return TransferResult(new, plan, before, after, bound)


# -- composition along a chain of chambers --------------------------------------------

def adjacency_graph(cluster: GridCluster) -> nx.Graph:
    """Chambers ``a ~ b`` when they share interface area and one of them is ``0`` or avoids the exterior."""
    t = cluster.facets
    m = cluster.m
    lo = np.minimum(t.inside, t.outside)
    hi = np.maximum(t.inside, t.outside)
    area: dict[tuple[int, int], float] = {}
    for a, b, s in zip(lo.tolist(), hi.tolist(), t.area.tolist()):
        area[(a, b)] = area.get((a, b), 0.0) + s
    ext = {k: area.get((0, k), 0.0) for k in range(1, m + 1)}
    G = nx.Graph()
    G.add_nodes_from(range(m + 1))
    for (a, b), s in sorted(area.items()):
        if a == b or s <= 0:
            continue
        if a == 0 or ext.get(a, 0.0) == 0.0 or ext.get(b, 0.0) == 0.0:
            G.add_edge(a, b, area=s)
    return G


@dataclass
class AdjustReport:
    """Outcome of a single-chamber adjustment by a chain of pairwise transfers."""

    chamber: int
    epsilon: float
    chain: list[int]
    balls: list[tuple[tuple[float, ...], float]]
    volumes_before: list[float]
    volumes_after: list[float]
    delta_P: float
    K0: float
    rhs: float
    transfers: list[TransferResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.delta_P <= self.rhs * (1 + 1e-12) + 1e-15

    def to_dict(self, trace: bool = False) -> dict:
        return {
            "chamber": self.chamber, "epsilon": self.epsilon, "chain": self.chain,
            "balls": [{"center": list(c), "radius": r} for c, r in self.balls],
            "volumes_before": self.volumes_before, "volumes_after": self.volumes_after,
            "delta_P": self.delta_P, "K0": self.K0, "rhs": self.rhs, "passed": self.passed,
            "transfers": [t.to_dict(trace) for t in self.transfers],
        }


def adjust_single_chamber(cluster: GridCluster, fld: DensityField, h: int, epsilon: float,
                          excluded_ball: tuple[Sequence[float], float] | None = None, **search
                          ) -> tuple[GridCluster, AdjustReport]:
    """Change ``|E_h|`` by ``epsilon`` leaving every other chamber volume unchanged.

    Along a shortest chain ``h = h_1 ~ h_2 ~ ... ~ h_P = 0`` each ``h_l``
    receives ``epsilon`` from ``h_(l+1)``; the working balls are kept pairwise
    disjoint and away from ``excluded_ball``.

    Raises:
        DisconnectedChamber: no chain from ``h`` to the exterior.
        BallPackingFailure: no room for a further disjoint ball.
    """
    m = cluster.m
    if not 1 <= h <= m:
        raise ValueError(f"chamber index must lie in 1..{m}")
    G = adjacency_graph(cluster)
    if not nx.has_path(G, h, 0):
        raise DisconnectedChamber(f"chamber {h} has no admissible chain to the exterior")
    chain = [int(c) for c in nx.shortest_path(G, h, 0)]
    excluded = list(search.pop("excluded", ()))
    if excluded_ball is not None:
        excluded.append((tuple(map(float, excluded_ball[0])), float(excluded_ball[1])))
    start = cluster_perimeter(cluster, fld)
    if epsilon == 0:
        vols = [float(v) for v in start.volumes]
        return cluster, AdjustReport(h, 0.0, chain, [], vols, vols, 0.0, 0.0, 0.0)
    balls: list[tuple[tuple[float, ...], float]] = []
    results = []
    cur = cluster
    for a, b in zip(chain, chain[1:]):
        res = transfer(cur, fld, a, b, epsilon, excluded=excluded + balls, **search)
        balls.append((res.plan.x_bar, res.plan.radius))
        results.append(res)
        cur = res.cluster
    end = cluster_perimeter(cur, fld)
    N = cluster.dims
    K0 = max(r.bound.K_required for r in results)
    rep = AdjustReport(h, epsilon, chain, balls, [float(v) for v in start.volumes], [float(v) for v in end.volumes],
                       end.perimeter - start.perimeter, K0, m * K0 * abs(epsilon) ** ((N - 1) / N), results)
    return cur, rep


# -- two-phase adjustment inside a ball -----------------------------------------------

@dataclass
class BallReport:
    """Cap move inside a ball: perimeter increments under ``g`` and under the symmetrized density."""

    plan: SurgeryPlan
    delta_P: float
    delta_P_symmetrized: float
    beta: float
    C_ball: float
    rhs: float
    volumes_before: list[float]
    volumes_after: list[float]

    @property
    def passed(self) -> bool:
        return self.delta_P_symmetrized <= self.rhs * (1 + 1e-12) + 1e-15

    def to_dict(self, trace: bool = False) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "plan"}
        d["plan"] = self.plan.to_dict(trace)
        d["passed"] = self.passed
        return d


def _holder_constant(fld: DensityField, lb) -> float:
    if fld.holder_constant is not None:
        return float(fld.holder_constant)
    alpha = fld.alpha
    return max((w / t ** alpha for t, w in lb.omega_table.items()), default=0.0)


def adjust_in_ball(cluster: GridCluster, fld: DensityField, i: int, j: int, ball: tuple[Sequence[float], float],
                   epsilon: float, seed: int = 0, probes: int = PROBES) -> tuple[GridCluster, BallReport]:
    """Move volume ``epsilon`` from ``E_j`` to ``E_i`` by a flat cap move inside ``ball``.

    The ball must meet only chambers ``i`` and ``j``. When neither is the
    exterior the geometry and the reported bound use the symmetrized density
    ``(g(x, nu) + g(x, -nu)) / 2``, so any ``g`` with the same symmetrization
    yields the same cluster.

    Raises:
        BallNotBiphase: a third label meets the ball.
        EmptyInterface: no ``(i, j)`` facet inside the ball.
        EpsilonTooLarge: the ball is too small for ``epsilon``.
    """
    center = np.asarray(ball[0], dtype=float)
    r = float(ball[1])
    N, h = cluster.dims, cluster.spacing
    origin = np.asarray(cluster.origin)
    dist = np.linalg.norm(cluster.cell_centers - center, axis=-1)
    inball = dist <= r
    labels = set(np.unique(cluster.labels[inball]).tolist())
    if np.any(center - r < origin) or np.any(center + r > origin + np.asarray(cluster.shape) * h):
        labels.add(0)
    if not labels <= {i, j}:
        raise BallNotBiphase(f"ball meets chambers {sorted(labels - {i, j})} besides {i} and {j}")
    geo = fld if 0 in (i, j) else fld.symmetrized()
    t = cluster.facets
    near = t.between(i, j) & (np.linalg.norm(t.center - center, axis=1) < r)
    if cluster.profiles:
        near &= t.axis == cluster.column_axis
    sel = np.flatnonzero(near)
    if not len(sel):
        raise EmptyInterface(f"no ({i},{j}) facet inside the ball")
    k = int(sel[np.argmin(np.linalg.norm(t.center[sel] - center, axis=1))])
    grower, shrinker = (i, j) if epsilon >= 0 else (j, i)
    vertex = _facet_vertex(t, k, cluster)
    x = cluster.vertex(vertex)
    orient = int(t.sign[k]) if t.inside[k] == grower else -int(t.sign[k])
    gap = r - float(np.linalg.norm(x - center))
    n = 2 * int(math.floor(gap / (math.sqrt(N) * h) * (1 - 1e-12)))
    n = min(n, 2 * min(min(v, s - v) for v, s in zip(vertex, cluster.shape)))
    if n < MIN_CUBE_CELLS:
        raise EpsilonTooLarge("ball too small for a working cube of 8 cells")
    a = n * h
    lb = local_bounds(geo, x, probes, seed)
    M = lb.M
    alpha = fld.alpha
    gamma = (1 - alpha) / (alpha + N * (1 - alpha))
    beta = 1.0 - gamma
    eps_bar = (a / 8) ** N / (8 * M)
    if not abs(epsilon) < eps_bar:
        raise EpsilonTooLarge(f"|epsilon| = {abs(epsilon):.6g} >= {eps_bar:.6g} for this ball")
    ell0 = a / 8
    n_ell = min(n // 8, max(1, int(round(ell0 * (abs(epsilon) / eps_bar) ** gamma / h))))
    ell = n_ell * h
    plan = SurgeryPlan(
        x_bar=tuple(map(float, x)), i=i, j=j, epsilon=epsilon, swapped=False, condition_22=condition_22(cluster, i, j),
        axis=int(t.axis[k]), orient=orient, vertex=vertex, half=n // 2, spacing=h, a=a, rho=0.0, M=M,
        omega_x=lb.omega_limit, omega_bar=lb.omega(a * math.sqrt(N) / 2), omega_hat=lb.omega_limit, K_user=1.0,
        L=math.nan, eps_bar=eps_bar, seed=seed, ell=ell, n_ell=n_ell,
        Q_eps=tuple([n // 2 - n_ell // 2] * (N - 1)),
    )
    view = CubeView(cluster, plan.frame())
    cols = [loc for loc, _ in view_cols(view, plan)]
    bps = sorted({b for c in cols for b in view.rel_profile(c).breakpoints})
    centres = -a / 2 + (np.arange(n) + 0.5) * h
    below = [z for z in centres if (not bps or z < bps[0]) and all(abs(z - b) > 1e-9 * h for b in bps)]
    above = [z for z in centres if (not bps or z > bps[-1])]
    if not below or not above:
        raise BisectionBracketFailure("the interface fills the working cube; no room for the cap move")
    plan.sigma_minus = float(below[-1]) if bps else float(centres[n // 2 - 1])
    plan.sigma_plus = float(above[0]) if bps else float(centres[n // 2])
    hi = (a / 2 - plan.sigma_plus) * (1 - 1e-9)
    plan.delta_bar = hi
    before_g = cluster_perimeter(cluster, fld)
    before_s = cluster_perimeter(cluster, geo, volumes=False)
    if epsilon == 0:
        plan.delta = 0.0
        new = cluster
    else:
        vmap = _VolumeMap(cluster, fld, view, plan)
        plan.delta = solve_delta(vmap, abs(epsilon), 0.0, hi)
        new = _write_back(cluster, view, plan, vmap.profiles(plan.delta))
    after_g = cluster_perimeter(new, fld)
    after_s = cluster_perimeter(new, geo, volumes=False)
    C_H = _holder_constant(geo, lb)
    C_ball = (2.0 ** (N + 3) * (N - 1) * M * M * eps_bar ** gamma / ell0
              + C_H * (2 * M) ** alpha * ell0 ** ((N - 1) * (1 - alpha)) * eps_bar ** (-gamma * (N - 1) * (1 - alpha)))
    rep = BallReport(plan, after_g.perimeter - before_g.perimeter, after_s.perimeter - before_s.perimeter, beta,
                     C_ball, C_ball * abs(epsilon) ** beta, [float(v) for v in before_g.volumes],
                     [float(v) for v in after_g.volumes])
    return new, rep
