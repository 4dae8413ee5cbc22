"""Derived constants, the ``C_per[t]`` estimator and the boundedness checker.

``C_per[t]`` is the best constant in ``P(F) - P(E) <= C_per[t] |eps|^((N-1)/N)``
over volume changes ``|eps| <= t``. For continuous ``g`` it is expected to
behave like ``omega(t^(1/N))^(1/N)``.

The boundedness checker follows the truncation argument: ``v(t)`` is the
weighted volume of the cluster outside ``B_t`` and a bounded cluster has
``v(t) = 0`` for large ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .density import DensityField, local_bounds, modulus_of_continuity
from .errors import PipelineError
from .grid import GridCluster
from .measures import cluster_perimeter
from .surgery import (
    MIN_CUBE_CELLS, PROBES, _eps_fit, adjust_single_chamber, omega_hat, rho_choice, transfer_constant,
)


# -- derived constants ----------------------------------------------------------------

@dataclass(frozen=True)
class RequiredK:
    """``K_required = C omega_hat^(1/N)`` and the ingredients."""

    K_required: float
    C: float
    M: float
    omega_x: float
    omega_hat: float
    fallback: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def required_K(fld: DensityField, x, N: int | None = None, m: int = 1, K: float = 1.0,
               probes: int = PROBES, seed: int = 0, M: float | None = None,
               omega_x: float | None = None) -> RequiredK:
    """Smallest admissible ``K`` at ``x``.

    When ``omega_x = 0`` the user ``K`` is returned together with the fallback
    ``omega_hat = K^N / C^N``. ``M`` and ``omega_x`` are sampled with
    :func:`local_bounds` unless given.
    """
    x = tuple(float(v) for v in x)
    N = len(x) if N is None else N
    if M is None or omega_x is None:
        lb = local_bounds(fld, x, probes, seed)
        M = lb.M if M is None else M
        omega_x = lb.omega_limit if omega_x is None else omega_x
    C = transfer_constant(N, M)
    om = omega_hat(omega_x, K, N, M)
    if omega_x > 0:
        return RequiredK(C * om ** (1.0 / N), C, M, omega_x, om, False)
    return RequiredK(K, C, M, omega_x, om, True)


# -- C_per[t] ---------------------------------------------------------------------------

@dataclass
class CperCurve:
    """Measured ``C_per[t]`` against the reference ``omega(t^(1/N))^(1/N)``."""

    t_grid: list[float]
    C_values: list[float]
    omega_curve: list[float]
    fit_ratio: float
    cube_cells: list[int | None] = field(default_factory=list)
    t_effective: list[float] = field(default_factory=list)
    samples: list[int] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)
    errors: list[dict[str, int]] = field(default_factory=list)
    note: str = ""

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["fit_ratio"] = self.fit_ratio if math.isfinite(self.fit_ratio) else "inf"
        return d

    def to_csv(self) -> str:
        rows = ["t,C_value,omega_curve"]
        rows += [f"{t:.17g},{c:.17g},{w:.17g}" for t, c, w in zip(self.t_grid, self.C_values, self.omega_curve)]
        return "\n".join(rows) + "\n"


def omega_reference(fld: DensityField, x, t: float, N: int, probes: int = PROBES, seed: int = 0) -> float:
    """``omega(t^(1/N))^(1/N)`` at ``x``."""
    return modulus_of_continuity(fld, x, t ** (1.0 / N), probes, seed) ** (1.0 / N)


def _admissible_eps(a: float, h: float, n: int, om_hat: float, N: int, M: float, m: int, t: float) -> float:
    """Largest ``|eps| <= t`` (up to bisection) accepted on a cube of ``n`` cells; 0 when none."""
    rho = rho_choice(om_hat, N, M, m)
    if not _eps_fit(a, h, n, t, om_hat, rho, N, M, m)[0]:
        return t
    lo, hi = 0.0, t
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _eps_fit(a, h, n, mid, om_hat, rho, N, M, m)[0]:
            hi = mid
        else:
            lo = mid
    return lo


def rate_cube_cells(cluster: GridCluster, fld: DensityField, x, t: float, probes: int = PROBES,
                    seed: int = 0) -> tuple[int | None, float]:
    """Cube size for the ``|eps| <= t`` batch in rate mode, and the usable range ``t_eff``.

    Rate mode takes ``omega_hat = omega(a sqrt(N) / 2)``, so ``eps_bar`` grows
    with ``a``. The smallest even size (at least 8 cells) admitting ``|eps| = t``
    is returned with ``t_eff = t``. When the grid has no such cube the size
    with the largest admissible ``|eps|`` is returned with that value as
    ``t_eff``; ``(None, 0.0)`` when nothing is admissible. Where ``omega``
    vanishes the fallback ``omega_hat = (1/C)^N`` is used.
    """
    N, h, m = cluster.dims, cluster.spacing, cluster.m
    M = local_bounds(fld, x, probes, seed).M
    best: tuple[int | None, float] = (None, 0.0)
    xv = np.asarray(x, dtype=float)
    lo = np.asarray(cluster.origin)
    hi = lo + np.asarray(cluster.shape) * h
    # the cube is centred near x and must stay inside the grid
    n_max = 2 * int(math.floor(float(min(np.min(xv - lo), np.min(hi - xv))) / h + 1e-9))
    for n in range(MIN_CUBE_CELLS, n_max + 1, 2):
        a = n * h
        # omega = 0 takes the (K/C)^N fallback with K = 1
        om = modulus_of_continuity(fld, x, a * math.sqrt(N) / 2, probes, seed)
        reach = _admissible_eps(a, h, n, omega_hat(om, 1.0, N, M), N, M, m, t)
        if reach == t:
            return n, t
        if reach > best[1]:
            best = (n, reach)
    return best


def _reference_point(cluster: GridCluster, chamber: int) -> np.ndarray:
    """Centre of the facets of ``chamber`` (where the transfers happen)."""
    t = cluster.facets
    sel = t.touching(chamber)
    if not sel.any():
        return np.asarray(cluster.origin) + np.asarray(cluster.shape) * cluster.spacing / 2
    return t.center[sel].mean(axis=0)


def cper_sweep(cluster: GridCluster, fld: DensityField, t_grid: Sequence[float], chamber: int = 1,
               samples: int = 8, seed: int = 0, probes: int = PROBES) -> CperCurve:
    """Estimate ``C_per[t]`` with seeded batches of ``|eps| <= t``.

    For each ``t`` the cube size and the usable range ``t_eff <= t`` are fixed
    by :func:`rate_cube_cells`, then ``adjust_single_chamber`` runs in rate
    mode for ``eps = t_eff u`` with ``u`` uniform in ``[-1, 1]``. ``C_per[t]`` is the largest
    ``(P(F) - P(E)) / |eps|^((N-1)/N)``, clamped below at 0. Failing samples are
    skipped and counted by error name.
    """
    N = cluster.dims
    ts = sorted((float(t) for t in t_grid), reverse=True)
    if any(t <= 0 for t in ts):
        raise ValueError("t_grid must be positive")
    x = _reference_point(cluster, chamber)
    rng = np.random.default_rng(seed)
    curve = CperCurve(ts, [], [], math.inf)
    for t in ts:
        u = rng.uniform(-1.0, 1.0, samples)
        n, t_eff = rate_cube_cells(cluster, fld, x, t, probes, seed)
        curve.cube_cells.append(n)
        curve.t_effective.append(t_eff)
        curve.omega_curve.append(omega_reference(fld, x, t, N, probes, seed))
        best, used, errs = 0.0, 0, {}
        for k, uk in enumerate(u):
            eps = float(t_eff * uk)
            if eps == 0.0 or n is None:
                name = "NoCubeSize" if n is None else "ZeroEpsilon"
                errs[name] = errs.get(name, 0) + 1
                continue
            try:
                _, rep = adjust_single_chamber(cluster, fld, chamber, eps, rate_mode=True, cube_cells=n,
                                               seed=seed + k, probes=probes)
            except PipelineError as exc:
                name = type(exc).__name__
                errs[name] = errs.get(name, 0) + 1
                continue
            used += 1
            best = max(best, rep.delta_P / abs(eps) ** ((N - 1) / N))
        curve.C_values.append(best)
        curve.samples.append(used)
        curve.skipped.append(samples - used)
        curve.errors.append(errs)
    ratios = [c / w for c, w in zip(curve.C_values, curve.omega_curve) if w > 0]
    if ratios and len(ratios) == len(ts):
        curve.fit_ratio = max(ratios)
    else:
        curve.fit_ratio = math.inf
        curve.note = "omega vanishes on part of the grid; the fallback omega_hat = (K/C)^N applies there"
    return curve


# -- boundedness ------------------------------------------------------------------------

@dataclass
class TruncationTrace:
    """``v(t)``, its discrete derivative and the perimeters of the truncations."""

    t_grid: list[float]
    v_values: list[float]
    dv: list[float]
    perimeter_terms: list[tuple[float, float]]
    differential_margin: list[float]
    negative_margin_steps: list[int]
    verdict: str
    C_prime: float
    bounds: tuple[float, float]
    center: tuple[float, ...]

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def to_csv(self) -> str:
        rows = ["t,v,dv,P_inside,P_outside,margin"]
        for t, v, d, (pi, po), mg in zip(self.t_grid, self.v_values, self.dv, self.perimeter_terms,
                                          self.differential_margin):
            rows.append(f"{t:.17g},{v:.17g},{d:.17g},{pi:.17g},{po:.17g},{mg:.17g}")
        return "\n".join(rows) + "\n"


def _occupied_weight(cluster: GridCluster, fld: DensityField) -> np.ndarray:
    """Weighted volume of ``E_1 ∪ ... ∪ E_m`` in every cell, sub-cell data included."""
    N = cluster.dims
    frac = (cluster.labels != 0).astype(float)
    for idx, lab, d in cluster.ledger:
        if lab != 0:
            frac[idx] += d
    np.clip(frac, 0.0, 1.0, out=frac)
    return frac * fld.f(cluster.cell_centers.reshape(-1, N)).reshape(cluster.shape) * cluster.cell_volume


def _sampled_bounds(fld: DensityField, cluster: GridCluster, seed: int) -> tuple[float, float]:
    """Min and max of ``f`` and ``g`` over cell centres and axis normals."""
    N = cluster.dims
    pts = cluster.cell_centers.reshape(-1, N)
    vals = [fld.f(pts)]
    for d in range(N):
        for s in (1.0, -1.0):
            nu = np.zeros_like(pts)
            nu[:, d] = s
            vals.append(fld.g(pts, nu))
    allv = np.concatenate(vals)
    return float(allv.min()), float(allv.max())


def boundedness_check(cluster: GridCluster, fld: DensityField, C_prime: float, t_grid: Sequence[float],
                      center: Sequence[float] | None = None, perimeters: bool = True) -> TruncationTrace:
    """Truncation profile ``v(t) = |E \\ B_t|_f`` around ``center`` (default the coordinate origin).

    A cell lies outside ``B_t`` when its centre does, so ``v`` is exactly
    nonincreasing. ``|v'|`` uses centred differences with one-sided ends.
    The margin ``|v'(t)| - C' v(t)^((N-1)/N)`` is informational: it need not
    be positive for clusters that are not minimal.
    """
    N = cluster.dims
    ts = sorted({float(t) for t in t_grid})
    c = np.zeros(N) if center is None else np.asarray(center, dtype=float)
    lo, hi = _sampled_bounds(fld, cluster, 0)
    if not lo > 0:
        raise ValueError("densities must be bounded below by a positive constant")
    w = _occupied_weight(cluster, fld)
    dist = np.linalg.norm(cluster.cell_centers - c, axis=-1)
    order = np.argsort(dist, axis=None, kind="stable")
    ds = dist.ravel()[order]
    ws = w.ravel()[order]
    # suffix sums: weight of cells farther than t
    tail = np.concatenate([np.cumsum(ws[::-1])[::-1], [0.0]])
    v = [float(tail[np.searchsorted(ds, t, side="right")]) for t in ts]
    dv = list(np.abs(np.gradient(np.asarray(v), np.asarray(ts)))) if len(ts) > 1 else [0.0] * len(ts)
    margin = [float(d - C_prime * max(x, 0.0) ** ((N - 1) / N)) for d, x in zip(dv, v)]
    perims = []
    for t in ts:
        if not perimeters:
            perims.append((math.nan, math.nan))
            continue
        inside = dist <= t
        lab_in = np.where(inside, cluster.labels, 0)
        lab_out = np.where(inside, 0, cluster.labels)
        p_in = cluster_perimeter(GridCluster(lab_in, cluster.spacing, cluster.origin, cluster.m), fld,
                                 volumes=False).perimeter
        p_out = cluster_perimeter(GridCluster(lab_out, cluster.spacing, cluster.origin, cluster.m), fld,
                                  volumes=False).perimeter
        perims.append((p_in, p_out))
    # zero mass outside B_t only counts while B_t lies inside the grid
    lo_c = np.asarray(cluster.origin)
    hi_c = lo_c + np.asarray(cluster.shape) * cluster.spacing
    t_in = float(min(np.min(c - lo_c), np.min(hi_c - c)))
    bounded = any(x == 0.0 and t <= t_in for t, x in zip(ts, v))
    verdict = "BOUNDED" if bounded else "UNBOUNDED-WITHIN-GRID"
    neg = [k for k, mg in enumerate(margin) if mg < 0 and v[k] > 0]
    return TruncationTrace(ts, [float(x) for x in v], [float(d) for d in dv], perims, margin, neg, verdict,
                           float(C_prime), (lo, hi), tuple(map(float, c)))
