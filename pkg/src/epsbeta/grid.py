"""Labeled grid clusters, their boundary facets and column profiles.

A cluster with ``m`` chambers lives on an axis-aligned grid of cubic cells.
Every cell carries one label in ``{0, ..., m}``; label 0 is the exterior and
everything outside the grid is implicitly exterior as well.

Surgery needs volumes that vary continuously with a translation height, so a
cluster may also carry *column profiles*: for selected columns along one
``column_axis`` the exact run-length decomposition of labels with breakpoints
at arbitrary heights. The cell labels of such a column are the majority vote
of its profile and the difference is the sub-cell ledger used by the volume
and perimeter computations.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ColumnAxisConflict, CubeOutsideGrid, InvalidCluster, ProfileMismatch

# breakpoints closer than SNAP * spacing to a cell edge are treated as lying on it
SNAP = 1e-10


@dataclass(frozen=True)
class ColumnProfile:
    """Run-length decomposition of the labels along one column.

    ``labels[k]`` occupies ``(breakpoints[k-1], breakpoints[k])`` with the
    conventions ``breakpoints[-1] = lo`` and ``breakpoints[len] = hi``.
    Heights are absolute coordinates along the column axis.
    """

    base: tuple[int, ...]
    lo: float
    hi: float
    breakpoints: tuple[float, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        bps = self.breakpoints
        if len(self.labels) != len(bps) + 1:
            raise ProfileMismatch("need exactly one more label than breakpoints")
        if any(b1 <= b0 for b0, b1 in zip(bps, bps[1:])):
            raise ProfileMismatch("breakpoints must be strictly increasing")
        if bps and not (self.lo < bps[0] and bps[-1] < self.hi):
            raise ProfileMismatch("breakpoints must lie strictly inside the column")
        if any(a == b for a, b in zip(self.labels, self.labels[1:])):
            raise ProfileMismatch("adjacent intervals must carry different labels")

    @classmethod
    def from_cells(cls, base, values: Sequence[int], lo: float, spacing: float) -> "ColumnProfile":
        values = np.asarray(values)
        change = np.flatnonzero(values[1:] != values[:-1]) + 1
        bps = tuple(float(lo + k * spacing) for k in change)
        labels = (int(values[0]),) + tuple(int(values[k]) for k in change)
        return cls(tuple(base), float(lo), float(lo + len(values) * spacing), bps, labels)

    @classmethod
    def normalized(cls, base, lo, hi, bps, labels) -> "ColumnProfile":
        """Build a profile after dropping empty intervals and merging equal neighbours."""
        edges = [lo, *bps, hi]
        out_b: list[float] = []
        out_l: list[int] = []
        for k, lab in enumerate(labels):
            a, b = edges[k], edges[k + 1]
            if b <= a and k not in (0, len(labels) - 1):
                continue
            if out_l and out_l[-1] == lab:
                continue
            if out_l:
                out_b.append(float(a))
            out_l.append(int(lab))
        # empty leading/trailing intervals can leave breakpoints on the ends
        while out_b and out_b[0] <= lo:
            out_b.pop(0)
            out_l.pop(0)
        while out_b and out_b[-1] >= hi:
            out_b.pop()
            out_l.pop()
        return cls(tuple(base), float(lo), float(hi), tuple(out_b), tuple(out_l))

    def label_at(self, t) -> np.ndarray:
        idx = np.searchsorted(np.asarray(self.breakpoints, dtype=float), t, side="right")
        return np.asarray(self.labels)[idx]

    def segments(self) -> Iterator[tuple[float, float, int]]:
        edges = (self.lo, *self.breakpoints, self.hi)
        for k, lab in enumerate(self.labels):
            yield edges[k], edges[k + 1], lab

    def restrict(self, lo: float, hi: float) -> "ColumnProfile":
        bps = [b for b in self.breakpoints if lo < b < hi]
        labels = [int(self.label_at(0.5 * (a + b))) for a, b in zip([lo, *bps], [*bps, hi])]
        return ColumnProfile(self.base, float(lo), float(hi), tuple(bps), tuple(labels))

    def occupancy(self, edges: np.ndarray, label: int) -> np.ndarray:
        """Length of ``label`` inside each cell ``[edges[k], edges[k+1]]``."""
        out = np.zeros(len(edges) - 1)
        for a, b, lab in self.segments():
            if lab == label:
                out += np.clip(np.minimum(b, edges[1:]) - np.maximum(a, edges[:-1]), 0.0, None)
        return out

    def aligned(self, spacing: float) -> bool:
        k = (np.asarray(self.breakpoints) - self.lo) / spacing
        return bool(np.all(np.abs(k - np.round(k)) <= SNAP))


@dataclass(frozen=True)
class Box:
    """Half-open box of cell indices ``start[d] <= k < stop[d]``."""

    start: tuple[int, ...]
    stop: tuple[int, ...]

    @classmethod
    def centered_on_vertex(cls, vertex: Sequence[int], half: int) -> "Box":
        return cls(tuple(v - half for v in vertex), tuple(v + half for v in vertex))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in zip(self.start, self.stop))

    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(a, b) for a, b in zip(self.start, self.stop))

    def inside(self, shape: Sequence[int]) -> bool:
        return all(0 <= a < b <= n for a, b, n in zip(self.start, self.stop, shape))

    def lateral(self, axis: int) -> list[tuple[int, ...]]:
        ranges = [range(a, b) for d, (a, b) in enumerate(zip(self.start, self.stop)) if d != axis]
        return list(itertools.product(*ranges))


@dataclass(frozen=True)
class BoundaryFacet:
    location: tuple[float, ...]
    normal: tuple[float, ...]
    area: float
    inside_label: int
    outside_label: int


@dataclass(frozen=True, eq=False)
class FacetTable:
    """Column-oriented storage of boundary facets.

    ``normal = sign * e_axis`` points from ``inside`` to ``outside``. When one
    side is the exterior, ``inside`` is the chamber; otherwise ``inside`` is the
    smaller label. ``smoothed`` optionally holds renormalised averaged normals.
    """

    center: np.ndarray
    axis: np.ndarray
    sign: np.ndarray
    area: np.ndarray
    inside: np.ndarray
    outside: np.ndarray
    dims: int
    smoothed: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.area)

    def normals(self) -> np.ndarray:
        if self.smoothed is not None:
            return self.smoothed
        nrm = np.zeros((len(self), self.dims))
        nrm[np.arange(len(self)), self.axis] = self.sign
        return nrm

    def select(self, mask) -> "FacetTable":
        return FacetTable(
            self.center[mask], self.axis[mask], self.sign[mask], self.area[mask],
            self.inside[mask], self.outside[mask], self.dims,
            None if self.smoothed is None else self.smoothed[mask],
        )

    def touching(self, label: int) -> np.ndarray:
        return (self.inside == label) | (self.outside == label)

    def between(self, a: int, b: int) -> np.ndarray:
        return ((self.inside == a) & (self.outside == b)) | ((self.inside == b) & (self.outside == a))

    @classmethod
    def concat(cls, tables: Sequence["FacetTable"], dims: int) -> "FacetTable":
        tables = [t for t in tables if len(t)]
        if not tables:
            return cls.empty(dims)
        return cls(
            np.concatenate([t.center for t in tables]),
            np.concatenate([t.axis for t in tables]),
            np.concatenate([t.sign for t in tables]),
            np.concatenate([t.area for t in tables]),
            np.concatenate([t.inside for t in tables]),
            np.concatenate([t.outside for t in tables]),
            dims,
        )

    @classmethod
    def empty(cls, dims: int) -> "FacetTable":
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, dims)), z, z, np.zeros(0), z, z, dims)


def _orient(a: np.ndarray, b: np.ndarray):
    """Orient facets between ``a`` (negative side) and ``b`` (positive side)."""
    swap = (a == 0) | ((b != 0) & (b < a))
    return np.where(swap, b, a), np.where(swap, a, b), np.where(swap, -1, 1)


@dataclass(frozen=True, eq=False)
class GridCluster:
    """An m-cluster on a uniform grid of cubic cells.

    Attributes:
        labels: integer array of shape ``shape`` with entries in ``0..m``.
        spacing: cell side length.
        origin: coordinate of the lower grid corner.
        m: number of chambers.
        column_axis: axis of the column profiles (``None`` when there are none).
        profiles: column index -> full-height :class:`ColumnProfile`.
    """

    labels: np.ndarray
    spacing: float = 1.0
    origin: tuple[float, ...] | None = None
    m: int | None = None
    column_axis: int | None = None
    profiles: Mapping[tuple[int, ...], ColumnProfile] = field(default_factory=dict)

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if labels.ndim not in (2, 3):
            raise InvalidCluster(f"only 2D and 3D grids are supported, got ndim={labels.ndim}")
        if min(labels.shape) < 1:
            raise InvalidCluster("every shape entry must be >= 1")
        if not self.spacing > 0:
            raise InvalidCluster("spacing must be positive")
        m = int(labels.max(initial=0)) if self.m is None else int(self.m)
        if labels.size and (labels.min() < 0 or labels.max() > m):
            raise InvalidCluster("labels must lie in 0..m")
        labels.setflags(write=False)
        origin = (0.0,) * labels.ndim if self.origin is None else tuple(float(o) for o in self.origin)
        if len(origin) != labels.ndim:
            raise InvalidCluster("origin must have one entry per axis")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "profiles", dict(self.profiles))
        if self.profiles and self.column_axis is None:
            raise InvalidCluster("column profiles need a column_axis")

    # -- geometry -------------------------------------------------------
    @property
    def dims(self) -> int:
        return self.labels.ndim

    @property
    def shape(self) -> tuple[int, ...]:
        return self.labels.shape

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.dims

    @cached_property
    def cell_centers(self) -> np.ndarray:
        axes = [self.origin[d] + (np.arange(n) + 0.5) * self.spacing for d, n in enumerate(self.shape)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack(grids, axis=-1)

    def cell_center(self, index: Sequence[int]) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(index) + 0.5) * self.spacing

    def vertex(self, index: Sequence[int]) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * self.spacing

    def replace(self, **changes) -> "GridCluster":
        kw = dict(labels=self.labels, spacing=self.spacing, origin=self.origin, m=self.m,
                  column_axis=self.column_axis, profiles=self.profiles)
        kw.update(changes)
        if not kw["profiles"] and "column_axis" not in changes:
            kw["column_axis"] = None
        return GridCluster(**kw)

    # -- columns --------------------------------------------------------
    def axis_or_default(self, axis: int | None) -> int:
        if axis is None:
            axis = self.column_axis if self.column_axis is not None else self.dims - 1
        return axis % self.dims

    def column_values(self, col: Sequence[int], axis: int) -> np.ndarray:
        return np.moveaxis(self.labels, axis, -1)[tuple(col)]

    def column_extent(self, axis: int) -> tuple[float, float]:
        lo = self.origin[axis]
        return lo, lo + self.shape[axis] * self.spacing

    def column_edges(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.shape[axis] + 1) * self.spacing

    def column_profile(self, col: Sequence[int], axis: int | None = None) -> ColumnProfile:
        """Exact full-height profile of a column (sub-cell data when present)."""
        axis = self.axis_or_default(axis)
        col = tuple(int(c) for c in col)
        if self.profiles and axis == self.column_axis and col in self.profiles:
            return self.profiles[col]
        lo, _ = self.column_extent(axis)
        return ColumnProfile.from_cells(col, self.column_values(col, axis), lo, self.spacing)

    def full_index(self, col: Sequence[int], k: int, axis: int) -> tuple[int, ...]:
        idx = list(col)
        idx.insert(axis, k)
        return tuple(idx)

    @cached_property
    def ledger(self) -> list[tuple[tuple[int, ...], int, float]]:
        """Sub-cell corrections ``(cell index, label, occupied fraction - raster indicator)``.

        Sorted by column then cell; only non-zero corrections are listed.
        """
        out = []
        if not self.profiles:
            return out
        axis = self.column_axis
        edges = self.column_edges(axis)
        h = self.spacing
        for col in sorted(self.profiles):
            prof = self.profiles[col]
            raster = self.column_values(col, axis)
            for lab in sorted(set(prof.labels) | set(np.unique(raster).tolist())):
                frac = prof.occupancy(edges, lab) / h
                delta = frac - (raster == lab)
                for k in np.flatnonzero(delta != 0.0):
                    out.append((self.full_index(col, int(k), axis), int(lab), float(delta[k])))
        return out

    # -- boundary -------------------------------------------------------
    @cached_property
    def facets(self) -> FacetTable:
        return _facet_table(self)


def _raster_facets(cluster: GridCluster) -> FacetTable:
    L = cluster.labels
    N = cluster.dims
    h = cluster.spacing
    origin = np.asarray(cluster.origin)
    overlaid = None
    if cluster.profiles:
        c = cluster.column_axis
        lat_shape = tuple(n for d, n in enumerate(cluster.shape) if d != c)
        overlaid = np.zeros(lat_shape, dtype=bool)
        for col in cluster.profiles:
            overlaid[col] = True
    tables = []
    for d in range(N):
        pad = [(0, 0)] * N
        pad[d] = (1, 1)
        P = np.pad(L, pad)
        lo = [slice(None)] * N
        hi = [slice(None)] * N
        lo[d] = slice(0, -1)
        hi[d] = slice(1, None)
        a, b = P[tuple(lo)], P[tuple(hi)]
        mask = a != b
        if overlaid is not None:
            c = cluster.column_axis
            if d == c:
                lat = np.expand_dims(overlaid, c)
                mask &= ~lat
            else:
                # face k separates cells k-1 and k along d; drop if either column is overlaid
                ld = d if d < c else d - 1
                padw = [(0, 0)] * overlaid.ndim
                padw[ld] = (1, 1)
                W = np.pad(overlaid, padw)
                s0 = [slice(None)] * overlaid.ndim
                s1 = [slice(None)] * overlaid.ndim
                s0[ld] = slice(0, -1)
                s1[ld] = slice(1, None)
                either = W[tuple(s0)] | W[tuple(s1)]
                mask &= ~np.expand_dims(either, c)
        idx = np.nonzero(mask)
        if len(idx[0]) == 0:
            continue
        center = np.empty((len(idx[0]), N))
        for e in range(N):
            if e == d:
                center[:, e] = origin[e] + idx[e] * h
            else:
                center[:, e] = origin[e] + (idx[e] + 0.5) * h
        inside, outside, sign = _orient(a[idx], b[idx])
        tables.append(FacetTable(center, np.full(len(inside), d), sign, np.full(len(inside), h ** (N - 1)),
                                 inside, outside, N))
    return FacetTable.concat(tables, N)


def _zero_profile(lo: float, hi: float) -> ColumnProfile:
    return ColumnProfile((), lo, hi, (), (0,))


def _overlay_facets(cluster: GridCluster) -> FacetTable:
    c = cluster.column_axis
    N = cluster.dims
    h = cluster.spacing
    origin = np.asarray(cluster.origin)
    lo, hi = cluster.column_extent(c)
    edges = cluster.column_edges(c)
    lat_axes = [d for d in range(N) if d != c]
    lat_shape = [cluster.shape[d] for d in lat_axes]
    rows = {k: [] for k in ("center", "axis", "sign", "area", "inside", "outside")}

    def emit(center, axis, a, b, area):
        inside, outside, sign = _orient(np.asarray(a), np.asarray(b))
        n = len(inside)
        rows["center"].append(center)
        rows["axis"].append(np.full(n, axis))
        rows["sign"].append(sign)
        rows["area"].append(np.broadcast_to(area, (n,)).astype(float))
        rows["inside"].append(inside)
        rows["outside"].append(outside)

    def lateral_coords(col):
        return origin[lat_axes] + (np.asarray(col) + 0.5) * h

    for col in sorted(cluster.profiles):
        prof = cluster.profiles[col]
        # facets along the column axis, including the grid ends
        bps = np.asarray([lo, *prof.breakpoints, hi])
        below = np.asarray([0, *prof.labels])
        above = np.asarray([*prof.labels, 0])
        keep = below != above
        if keep.any():
            heights = bps[keep]
            center = np.empty((len(heights), N))
            center[:, lat_axes] = lateral_coords(col)
            center[:, c] = heights
            emit(center, c, below[keep], above[keep], h ** (N - 1))
        # lateral faces
        for li, d in enumerate(lat_axes):
            for step in (+1, -1):
                nb = list(col)
                nb[li] += step
                nb = tuple(nb)
                in_grid = 0 <= nb[li] < lat_shape[li]
                if step == -1 and in_grid and nb in cluster.profiles:
                    continue  # handled from the neighbour's +1 side
                other = cluster.column_profile(nb, c) if in_grid else _zero_profile(lo, hi)
                neg, pos = (prof, other) if step == 1 else (other, prof)
                pts = np.unique(np.concatenate([edges, neg.breakpoints, pos.breakpoints]))
                mids = 0.5 * (pts[1:] + pts[:-1])
                lens = pts[1:] - pts[:-1]
                la, lb = neg.label_at(mids), pos.label_at(mids)
                diff = (la != lb) & (lens > 0)
                if not diff.any():
                    continue
                center = np.empty((int(diff.sum()), N))
                center[:, lat_axes] = lateral_coords(col)
                face = col[li] + (1 if step == 1 else 0)
                center[:, d] = origin[d] + face * h
                center[:, c] = mids[diff]
                emit(center, d, la[diff], lb[diff], lens[diff] * h ** (N - 2))
    if not rows["area"]:
        return FacetTable.empty(N)
    return FacetTable(*(np.concatenate(rows[k]) for k in ("center", "axis", "sign", "area", "inside", "outside")), N)


def _facet_table(cluster: GridCluster) -> FacetTable:
    raster = _raster_facets(cluster)
    if not cluster.profiles:
        return raster
    return FacetTable.concat([raster, _overlay_facets(cluster)], cluster.dims)


def smooth_normals(table: FacetTable, spacing: float, radius: float = 1.5) -> FacetTable:
    """Average each facet normal with its same-interface neighbours within ``radius`` cells."""
    from scipy.spatial import cKDTree

    if not len(table):
        return table
    raw = np.zeros((len(table), table.dims))
    raw[np.arange(len(table)), table.axis] = table.sign
    tree = cKDTree(table.center)
    out = np.empty_like(raw)
    for k, nbrs in enumerate(tree.query_ball_point(table.center, r=radius * spacing)):
        nbrs = np.asarray(nbrs)
        same = (table.inside[nbrs] == table.inside[k]) & (table.outside[nbrs] == table.outside[k])
        v = raw[nbrs[same]].sum(axis=0)
        nv = np.linalg.norm(v)
        out[k] = raw[k] if nv == 0 else v / nv
    return FacetTable(table.center, table.axis, table.sign, table.area, table.inside, table.outside,
                      table.dims, out)


def extract_boundary(cluster: GridCluster, smooth: bool = False) -> list[BoundaryFacet]:
    """One facet per label change, including faces against the implicit exterior."""
    table = cluster.facets
    if smooth:
        table = smooth_normals(table, cluster.spacing)
    normals = table.normals()
    return [
        BoundaryFacet(tuple(map(float, table.center[k])), tuple(map(float, normals[k])),
                      float(table.area[k]), int(table.inside[k]), int(table.outside[k]))
        for k in range(len(table))
    ]


def _check_cube(cluster: GridCluster, cube: Box):
    if len(cube.start) != cluster.dims or not cube.inside(cluster.shape):
        raise CubeOutsideGrid(f"box {cube} exceeds grid of shape {cluster.shape}")


def vertical_sections(cluster: GridCluster, cube: Box, axis: int | None = None) -> dict[tuple[int, ...], ColumnProfile]:
    """Exact label profile of every column of ``cube`` along ``axis``.

    Profiles are restricted to the cube's extent along the axis and use
    absolute heights.
    """
    _check_cube(cluster, cube)
    axis = cluster.axis_or_default(axis)
    if cluster.profiles and axis != cluster.column_axis:
        raise ColumnAxisConflict(f"sub-cell data is along axis {cluster.column_axis}, not {axis}")
    lo = cluster.origin[axis] + cube.start[axis] * cluster.spacing
    hi = cluster.origin[axis] + cube.stop[axis] * cluster.spacing
    return {col: cluster.column_profile(col, axis).restrict(lo, hi) for col in cube.lateral(axis)}


def _splice(full: ColumnProfile, part: ColumnProfile) -> ColumnProfile:
    segs = [(a, min(b, part.lo), lab) for a, b, lab in full.segments() if a < part.lo]
    segs += list(part.segments())
    segs += [(max(a, part.hi), b, lab) for a, b, lab in full.segments() if b > part.hi]
    return ColumnProfile.normalized(full.base, full.lo, full.hi,
                                    [s[1] for s in segs[:-1]], [s[2] for s in segs])


def _snap(prof: ColumnProfile, spacing: float) -> ColumnProfile:
    k = (np.asarray(prof.breakpoints) - prof.lo) / spacing
    near = np.abs(k - np.round(k)) <= SNAP
    if not near.any():
        return prof
    bps = [prof.lo + round(kk) * spacing if nr else b for kk, nr, b in zip(k, near, prof.breakpoints)]
    return ColumnProfile.normalized(prof.base, prof.lo, prof.hi, bps, prof.labels)


def majority_labels(prof: ColumnProfile, edges: np.ndarray) -> np.ndarray:
    """Majority label of each cell; exact ties go to the lower interval's label."""
    n = len(edges) - 1
    best = np.full(n, -1.0)
    out = np.zeros(n, dtype=np.int64)
    for lab in dict.fromkeys(prof.labels):
        occ = prof.occupancy(edges, lab)
        better = occ > best
        # a tie is won by whichever label starts lower in the cell
        tie = occ == best
        if tie.any():
            first_new = _first_start(prof, edges, lab)
            first_old = np.array([_first_start(prof, edges, int(o))[k] for k, o in enumerate(out)])
            better |= tie & (first_new < first_old)
        best = np.where(better, occ, best)
        out = np.where(better, lab, out)
    return out


def _first_start(prof: ColumnProfile, edges: np.ndarray, label: int) -> np.ndarray:
    start = np.full(len(edges) - 1, np.inf)
    for a, b, lab in prof.segments():
        if lab != label:
            continue
        lo = np.maximum(a, edges[:-1])
        hit = np.minimum(b, edges[1:]) > lo
        start = np.where(hit, np.minimum(start, lo), start)
    return start


def rasterize_profiles(profiles: Mapping[tuple[int, ...], ColumnProfile], cluster: GridCluster, cube: Box,
                       axis: int | None = None) -> GridCluster:
    """Write exact column profiles for ``cube`` back into a cluster.

    Cells take the majority label; columns whose breakpoints are not all on
    cell edges keep their exact profile as sub-cell data.
    """
    _check_cube(cluster, cube)
    axis = cluster.axis_or_default(axis)
    if cluster.profiles and axis != cluster.column_axis:
        raise ColumnAxisConflict(f"sub-cell data is along axis {cluster.column_axis}, not {axis}")
    cols = cube.lateral(axis)
    if set(profiles) != set(cols):
        raise ProfileMismatch("profiles must cover exactly the columns of the cube")
    h = cluster.spacing
    lo = cluster.origin[axis] + cube.start[axis] * h
    hi = cluster.origin[axis] + cube.stop[axis] * h
    edges = cluster.column_edges(axis)
    labels = np.moveaxis(np.array(cluster.labels), axis, -1)
    new_profiles = dict(cluster.profiles)
    for col in cols:
        part = profiles[col]
        if abs(part.lo - lo) > SNAP * h or abs(part.hi - hi) > SNAP * h:
            raise ProfileMismatch(f"profile {col} does not span the cube along axis {axis}")
        if any(lab < 0 or lab > cluster.m for lab in part.labels):
            raise ProfileMismatch("profile labels must lie in 0..m")
        part = ColumnProfile(col, lo, hi, part.breakpoints, part.labels)
        full = _snap(_splice(cluster.column_profile(col, axis), part), h)
        k0, k1 = cube.start[axis], cube.stop[axis]
        labels[col][k0:k1] = majority_labels(full, edges[k0:k1 + 1])
        if full.aligned(h):
            new_profiles.pop(col, None)
        else:
            new_profiles[col] = full
    labels = np.moveaxis(labels, -1, axis)
    return cluster.replace(labels=labels, profiles=new_profiles,
                           column_axis=axis if new_profiles else None)


def relabel_cells(cluster: GridCluster, mask: np.ndarray, label: int) -> GridCluster:
    """Give every cell selected by ``mask`` the label ``label`` (whole cells, sub-cell data kept exact)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != cluster.shape:
        raise InvalidCluster("mask must match the grid shape")
    labels = np.array(cluster.labels)
    labels[mask] = label
    profiles = dict(cluster.profiles)
    if profiles:
        c = cluster.column_axis
        edges = cluster.column_edges(c)
        moved = np.moveaxis(mask, c, -1)
        for col in list(profiles):
            hit = np.flatnonzero(moved[col])
            if not len(hit):
                continue
            prof = profiles[col]
            for k in hit:
                part = ColumnProfile(col, float(edges[k]), float(edges[k + 1]), (), (int(label),))
                prof = _splice(prof, part)
            if prof.aligned(cluster.spacing):
                profiles.pop(col)
            else:
                profiles[col] = prof
    return cluster.replace(labels=labels, profiles=profiles)


def changed_cells(before: GridCluster, after: GridCluster) -> np.ndarray:
    """Mask of cells whose label content differs, sub-cell fractions included."""
    if before.shape != after.shape:
        raise InvalidCluster("clusters must share a grid")
    mask = before.labels != after.labels
    a = {(idx, lab): frac for idx, lab, frac in before.ledger}
    b = {(idx, lab): frac for idx, lab, frac in after.ledger}
    for key in a.keys() | b.keys():
        if a.get(key, 0.0) != b.get(key, 0.0):
            mask[key[0]] = True
    return mask
