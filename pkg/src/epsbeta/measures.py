"""Weighted volumes and the weighted cluster perimeter.

The cluster perimeter is computed twice: once as the half sum of the
chamber perimeters plus the perimeter of the union, and once directly from
the facets with the weighting

* ``g(x, nu_out)`` on facets against the exterior, with ``nu_out`` leaving
  the chamber,
* ``(g(x, nu) + g(x, -nu)) / 2`` on facets between two chambers.

Both are stored so callers can compare them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .density import DensityField
from .grid import FacetTable, GridCluster, smooth_normals


def unit_ball_volume(N: int) -> float:
    return math.pi ** (N / 2) / math.gamma(N / 2 + 1)


def euclidean_isoperimetric_lower_bound(volume: float, N: int) -> float:
    """``N * omega_N^(1/N) * volume^((N-1)/N)``."""
    if volume < 0:
        raise ValueError("volume must be nonnegative")
    return N * unit_ball_volume(N) ** (1.0 / N) * volume ** ((N - 1) / N)


def weighted_volume(cluster: GridCluster, fld: DensityField) -> np.ndarray:
    """Midpoint-rule ``|E_n|_f`` for ``n = 1..m`` including sub-cell corrections."""
    vols = np.zeros(cluster.m + 1)
    if cluster.labels.size:
        fvals = fld.f(cluster.cell_centers.reshape(-1, cluster.dims)) * cluster.cell_volume
        vols += np.bincount(cluster.labels.ravel(), weights=fvals, minlength=cluster.m + 1)
    ledger = cluster.ledger
    if ledger:
        idx = np.array([e[0] for e in ledger])
        labs = np.array([e[1] for e in ledger])
        frac = np.array([e[2] for e in ledger])
        fv = fld.f(cluster.cell_centers[tuple(idx.T)]) * cluster.cell_volume
        # fixed ledger order keeps the sum bit-stable
        for lab, w in zip(labs, frac * fv):
            vols[lab] += w
    return vols[1:]


def facet_weights(table: FacetTable, fld: DensityField, symmetric_interior: bool = True) -> np.ndarray:
    """Cluster-perimeter weight of every facet (per unit area)."""
    if not len(table):
        return np.zeros(0)
    nrm = table.normals()
    ext = table.outside == 0
    w = np.empty(len(table))
    if ext.any():
        w[ext] = fld.g(table.center[ext], nrm[ext])
    intr = ~ext
    if intr.any():
        if symmetric_interior:
            w[intr] = fld.g_symmetric(table.center[intr], nrm[intr])
        else:
            w[intr] = fld.g(table.center[intr], nrm[intr])
    return w


@dataclass
class MeasureReport:
    """Volumes, cluster perimeter and its decompositions.

    ``per_chamber_perimeter[0]`` is the perimeter of the union, and
    ``perimeter`` is the half sum of ``per_chamber_perimeter``.
    ``perimeter_direct`` is the facet-by-facet evaluation of the same value.
    """

    volumes: np.ndarray
    perimeter: float
    per_chamber_perimeter: np.ndarray
    interface_breakdown: dict[tuple[int, int], float]
    perimeter_direct: float
    facet_area: dict[tuple[int, int], float] = field(default_factory=dict)

    @property
    def formula_gap(self) -> float:
        return abs(self.perimeter - self.perimeter_direct)

    def to_dict(self) -> dict:
        return {
            "volumes": [float(v) for v in self.volumes],
            "perimeter": self.perimeter,
            "perimeter_direct": self.perimeter_direct,
            "per_chamber_perimeter": [float(v) for v in self.per_chamber_perimeter],
            "interface_breakdown": {f"{i},{j}": v for (i, j), v in sorted(self.interface_breakdown.items())},
            "interface_area": {f"{i},{j}": v for (i, j), v in sorted(self.facet_area.items())},
        }


def _pairwise_sum(values: np.ndarray) -> float:
    return float(math.fsum(values.tolist()))


def cluster_perimeter(cluster: GridCluster, fld: DensityField, smooth: bool = False,
                      volumes: bool = True) -> MeasureReport:
    """Evaluate volumes and the weighted cluster perimeter.

    Args:
        cluster: the cluster.
        fld: densities.
        smooth: evaluate ``g`` on averaged normals instead of axis normals.
        volumes: skip the volume computation when ``False`` (volumes are then zeros).
    """
    table = cluster.facets
    if smooth:
        table = smooth_normals(table, cluster.spacing)
    m = cluster.m
    vol = weighted_volume(cluster, fld) if volumes else np.zeros(m)
    if not len(table):
        return MeasureReport(vol, 0.0, np.zeros(m + 1), {}, 0.0, {})
    nrm = table.normals()
    # per-chamber perimeters: each chamber sees its own outward normal
    g_in = fld.g(table.center, nrm) * table.area
    g_out = fld.g(table.center, -nrm) * table.area
    per = np.zeros(m + 1)
    for n in range(1, m + 1):
        per[n] = _pairwise_sum(g_in[table.inside == n]) + _pairwise_sum(g_out[table.outside == n])
    per[0] = _pairwise_sum(g_in[table.outside == 0])
    perimeter = _pairwise_sum(per) / 2.0
    w = facet_weights(table, fld) * table.area
    breakdown: dict[tuple[int, int], float] = {}
    areas: dict[tuple[int, int], float] = {}
    lo = np.minimum(table.inside, table.outside)
    hi = np.maximum(table.inside, table.outside)
    key = lo * (m + 1) + hi
    for k in np.unique(key):
        sel = key == k
        pair = (int(k // (m + 1)), int(k % (m + 1)))
        breakdown[pair] = _pairwise_sum(w[sel])
        areas[pair] = _pairwise_sum(table.area[sel])
    direct = _pairwise_sum(np.array(list(breakdown.values())))
    return MeasureReport(vol, perimeter, per, breakdown, direct, areas)


def facet_sum(cluster: GridCluster, fld: DensityField) -> float:
    """Plain ``sum g(x, nu) * area`` over the facets; equals the cluster perimeter for even ``g``."""
    table = cluster.facets
    if not len(table):
        return 0.0
    return _pairwise_sum(fld.g(table.center, table.normals()) * table.area)


def interface_area(cluster: GridCluster, i: int, j: int) -> float:
    """Unweighted area of the ``(i, j)`` interface."""
    t = cluster.facets
    return _pairwise_sum(t.area[t.between(i, j)])


def measure(cluster: GridCluster, fld: DensityField, smooth: bool = False) -> MeasureReport:
    return cluster_perimeter(cluster, fld, smooth=smooth)
