"""Batch front end.

``epsbeta COMMAND --input CLUSTER [--density DENSITY.json] [options]``

Commands: measure, surgery, infiltrate, adjust, verify, cper, boundedness.
Reports are deterministic JSON (or CSV for curves when ``--out`` ends in
``.csv``) written to ``--out`` or stdout.

Exit status: 0 success, 1 verification failure, 2 configuration error,
3 I/O error, 4 pipeline error (the report names the error class).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import analysis, infiltration, io, measures, surgery
from .density import DensityField, beta_exponent, constant, load_density
from .errors import ConditionViolated, InvalidCluster, InvalidDensity, NoValidRadius, PipelineError
from .grid import GridCluster, changed_cells

COMMANDS = ("measure", "surgery", "infiltrate", "adjust", "verify", "cper", "boundedness")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO, EXIT_PIPELINE = 0, 1, 2, 3, 4


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    input_path: str
    density_path: str | None = None
    epsilon: list[float] = field(default_factory=list)
    i: int | None = None
    j: int | None = None
    h: int | None = None
    seed: int = 0
    output_path: str | None = None
    cluster_out: str | None = None
    trace: bool = False
    dump_infiltration: str | None = None
    point: list[float] | None = None
    radius: float | None = None
    K: float = 1.0
    t_grid: list[float] = field(default_factory=list)
    samples: int = 8
    c_prime: float = 1.0
    center: list[float] | None = None

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        need = {
            "surgery": ("i", "j", "epsilon"), "infiltrate": ("i", "j"), "adjust": ("h", "epsilon"),
            "cper": ("t_grid",), "boundedness": ("t_grid",),
        }.get(self.command, ())
        missing = [k for k in need if getattr(self, k) in (None, [])]
        if missing:
            raise ConfigError(f"{self.command} needs --{', --'.join(m.replace('_', '-') for m in missing)}")
        if self.command in ("surgery", "adjust") and len(self.epsilon) != 1:
            raise ConfigError(f"{self.command} takes a single --epsilon")
        if not self.K > 0:
            raise ConfigError("--K must be positive")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epsbeta", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--input", required=True, help="cluster file (.pgm or raw with .json sidecar)")
    p.add_argument("--density", help="density JSON; g = f = 1 when omitted")
    p.add_argument("--epsilon", type=_floats, default=[], help="signed volume change (comma list for verify)")
    p.add_argument("--i", type=int)
    p.add_argument("--j", type=int)
    p.add_argument("--h", type=int, help="chamber to adjust")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report path (stdout when omitted)")
    p.add_argument("--cluster-out", help="where to save the modified cluster")
    p.add_argument("--trace", action="store_true", help="include step-by-step traces")
    p.add_argument("--dump-infiltration", help="PGM path for the infiltration mask")
    p.add_argument("--x", type=_floats, help="infiltration centre")
    p.add_argument("--radius", type=float, help="infiltration radius (searched when omitted)")
    p.add_argument("--K", type=float, default=1.0, help="user K for the omega = 0 fallback")
    p.add_argument("--t-grid", type=_floats, default=[], help="comma list of t values")
    p.add_argument("--samples", type=int, default=8, help="epsilon samples per t for cper")
    p.add_argument("--c-prime", type=float, default=1.0)
    p.add_argument("--center", type=_floats, help="centre of the truncation balls")
    return p


def config_from_args(argv: Sequence[str] | None) -> RunConfig:
    a = build_parser().parse_args(argv)
    cfg = RunConfig(a.command, a.input, a.density, a.epsilon, a.i, a.j, a.h, a.seed, a.out, a.cluster_out,
                    a.trace, a.dump_infiltration, a.x, a.radius, a.K, a.t_grid, a.samples, a.c_prime, a.center)
    cfg.validate()
    return cfg


# -- commands -----------------------------------------------------------------------

def _measure(cfg: RunConfig, cluster: GridCluster, fld: DensityField) -> tuple[dict, bool]:
    return measures.cluster_perimeter(cluster, fld).to_dict(), True


def _save(cfg: RunConfig, cluster: GridCluster):
    if cfg.cluster_out:
        io.save_cluster(cfg.cluster_out, cluster)


def _surgery(cfg: RunConfig, cluster: GridCluster, fld: DensityField) -> tuple[dict, bool]:
    res = surgery.transfer(cluster, fld, cfg.i, cfg.j, cfg.epsilon[0], K=cfg.K, seed=cfg.seed)
    _save(cfg, res.cluster)
    return res.to_dict(cfg.trace), res.bound.passed


def _point(cfg: RunConfig, cluster: GridCluster) -> list[float]:
    if cfg.point is not None:
        if len(cfg.point) != cluster.dims:
            raise ConfigError(f"--x needs {cluster.dims} coordinates")
        return cfg.point
    t = cluster.facets
    sel = np.flatnonzero(t.between(cfg.i, cfg.j))
    if not len(sel):
        raise ConfigError(f"no ({cfg.i},{cfg.j}) interface to pick a default --x from")
    # the facet farthest from the grid boundary leaves the most room for balls
    c = t.center[sel]
    lo = np.asarray(cluster.origin)
    hi = lo + np.asarray(cluster.shape) * cluster.spacing
    room = np.minimum(c - lo, hi - c).min(axis=1)
    return [float(v) for v in c[int(np.argmax(room))]]


def _infiltrate(cfg: RunConfig, cluster: GridCluster, fld: DensityField) -> tuple[dict, bool]:
    x = _point(cfg, cluster)
    new, rep = infiltration.infiltrate(cluster, fld, x, cfg.i, cfg.j, cfg.radius, seed=cfg.seed)
    if cfg.dump_infiltration:
        if cluster.dims != 2:
            raise ConfigError("--dump-infiltration needs a 2D grid")
        io.write_pgm(cfg.dump_infiltration, rep.mask.astype(np.int64), maxval=1)
    _save(cfg, new)
    return rep.to_dict(), rep.passed


def _adjust(cfg: RunConfig, cluster: GridCluster, fld: DensityField) -> tuple[dict, bool]:
    new, rep = surgery.adjust_single_chamber(cluster, fld, cfg.h, cfg.epsilon[0], K=cfg.K, seed=cfg.seed)
    _save(cfg, new)
    return rep.to_dict(cfg.trace), rep.passed


def _cper(cfg: RunConfig, cluster: GridCluster, fld: DensityField) -> tuple[dict | str, bool]:
    curve = analysis.cper_sweep(cluster, fld, cfg.t_grid, chamber=cfg.h or 1, samples=cfg.samples, seed=cfg.seed)
    if cfg.output_path and cfg.output_path.endswith(".csv"):
        return curve.to_csv(), True
    return curve.to_dict(), True


def _boundedness(cfg: RunConfig, cluster: GridCluster, fld: DensityField) -> tuple[dict | str, bool]:
    tr = analysis.boundedness_check(cluster, fld, cfg.c_prime, cfg.t_grid, cfg.center)
    if cfg.output_path and cfg.output_path.endswith(".csv"):
        return tr.to_csv(), True
    return tr.to_dict(), True


def _check(checks: dict, name: str, passed: bool, **detail):
    checks[name] = {"passed": bool(passed), **detail}


def _verify(cfg: RunConfig, cluster: GridCluster, fld: DensityField) -> tuple[dict, bool]:
    """Invariant suite over every module that the given options make applicable."""
    checks: dict[str, Any] = {}
    rep = measures.cluster_perimeter(cluster, fld)
    gap = rep.formula_gap / max(1.0, abs(rep.perimeter))
    _check(checks, "perimeter_formula", gap <= 1e-12, relative_gap=gap)
    _check(checks, "volumes_nonnegative", bool(np.all(rep.volumes >= 0)), volumes=rep.volumes)
    pts = cluster.cell_centers.reshape(-1, cluster.dims)
    try:
        fld.f(pts)
        for d in range(cluster.dims):
            nu = np.zeros_like(pts)
            nu[:, d] = 1.0
            fld.g(pts, nu)
            fld.g(pts, -nu)
        _check(checks, "density_positive", True)
    except InvalidDensity as exc:
        _check(checks, "density_positive", False, message=str(exc))
    b0, b1 = beta_exponent(0.0, cluster.dims), beta_exponent(1.0, cluster.dims)
    _check(checks, "beta_range", b0 <= beta_exponent(fld.alpha, cluster.dims) <= b1)
    if cfg.i is not None and cfg.j is not None:
        for k, eps in enumerate(cfg.epsilon or []):
            _verify_transfer(checks, f"transfer[{k}]", cluster, fld, cfg, eps)
        try:
            x = _point(cfg, cluster)
            _, irep = infiltration.infiltrate(cluster, fld, x, cfg.i, cfg.j, cfg.radius, seed=cfg.seed)
            _check(checks, "infiltration", irep.passed, case=irep.case_taken, drop=irep.perimeter_drop,
                   bound=irep.bound, no_infiltration=irep.no_infiltration)
        except (NoValidRadius, ConditionViolated) as exc:
            # no admissible radius or pair means there is nothing to absorb, not a broken invariant
            _check(checks, "infiltration", True, skipped=type(exc).__name__, message=str(exc))
        except (PipelineError, ConfigError) as exc:
            _check(checks, "infiltration", False, error=type(exc).__name__, message=str(exc))
    if cfg.h is not None:
        for k, eps in enumerate(cfg.epsilon or []):
            try:
                new, arep = surgery.adjust_single_chamber(cluster, fld, cfg.h, eps, K=cfg.K, seed=cfg.seed)
                want = np.asarray(arep.volumes_before)
                want[cfg.h - 1] += eps
                got = np.asarray(arep.volumes_after)
                rel = float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-300)))
                _check(checks, f"adjust[{k}]", arep.passed and rel <= 1e-9, relative_volume_error=rel,
                       delta_P=arep.delta_P, rhs=arep.rhs, balls=len(arep.balls))
            except PipelineError as exc:
                _check(checks, f"adjust[{k}]", False, error=type(exc).__name__, message=str(exc))
    ok = all(c["passed"] for c in checks.values())
    return {"checks": checks, "passed": ok}, ok


def _verify_transfer(checks: dict, name: str, cluster: GridCluster, fld: DensityField, cfg: RunConfig,
                     eps: float):
    try:
        res = surgery.transfer(cluster, fld, cfg.i, cfg.j, eps, K=cfg.K, seed=cfg.seed)
    except PipelineError as exc:
        _check(checks, name, False, error=type(exc).__name__, message=str(exc))
        return
    plan = res.plan
    before, after = res.before.volumes, res.after.volumes
    # |F_i| = |E_i| + eps and |F_j| = |E_j| - eps for the ordered pair of the plan
    k, target = (plan.i, before[plan.i - 1] + plan.epsilon) if plan.i else (plan.j, before[plan.j - 1] - plan.epsilon)
    exact = abs(after[k - 1] - target) <= 1e-10 * max(abs(target), 1e-300)
    others = [k for k in range(cluster.m) if k + 1 not in (plan.i, plan.j)]
    untouched = all(before[k] == after[k] for k in others)
    changed = changed_cells(cluster, res.cluster)
    dist = np.linalg.norm(cluster.cell_centers[changed] - np.asarray(plan.x_bar), axis=-1)
    far = float(dist.max()) if dist.size else 0.0
    _check(checks, name, exact and untouched and far <= plan.radius and res.bound.passed, epsilon=eps,
           volume_exact=exact, others_identical=untouched, max_change_distance=far, radius=plan.radius,
           delta_P=res.bound.delta_P, rhs=res.bound.rhs)


HANDLERS = {"measure": _measure, "surgery": _surgery, "infiltrate": _infiltrate, "adjust": _adjust,
            "verify": _verify, "cper": _cper, "boundedness": _boundedness}


def _emit(cfg: RunConfig, payload: dict | str):
    text = payload if isinstance(payload, str) else io.dumps(payload)
    if cfg.output_path:
        Path(cfg.output_path).write_text(text)
    else:
        sys.stdout.write(text)


def run(cfg: RunConfig) -> int:
    """Execute one command; returns the exit status."""
    try:
        cluster = io.load_cluster(cfg.input_path)
        fld = load_density(cfg.density_path) if cfg.density_path else constant()
    except (OSError, InvalidCluster, ValueError) as exc:
        if isinstance(exc, InvalidDensity):
            sys.stderr.write(f"configuration error: {exc}\n")
            return EXIT_CONFIG
        sys.stderr.write(f"I/O error: {exc}\n")
        return EXIT_IO
    try:
        payload, ok = HANDLERS[cfg.command](cfg, cluster, fld)
    except PipelineError as exc:
        report = {"command": cfg.command, "error": type(exc).__name__, "message": str(exc)}
        try:
            _emit(cfg, report)
        except OSError:
            pass
        sys.stderr.write(f"{type(exc).__name__}: {exc}\n")
        return EXIT_PIPELINE
    except (ConfigError, InvalidDensity) as exc:
        sys.stderr.write(f"configuration error: {exc}\n")
        return EXIT_CONFIG
    except OSError as exc:
        sys.stderr.write(f"I/O error: {exc}\n")
        return EXIT_IO
    try:
        _emit(cfg, payload)
    except OSError as exc:
        sys.stderr.write(f"I/O error: {exc}\n")
        return EXIT_IO
    return EXIT_OK if ok else EXIT_VERIFY


def main(argv: Sequence[str] | None = None) -> int:
    try:
        cfg = config_from_args(argv)
    except ConfigError as exc:
        sys.stderr.write(f"configuration error: {exc}\n")
        return EXIT_CONFIG
    except SystemExit as exc:
        # argparse reports usage errors with status 2 and --help with 0
        return int(exc.code or 0)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
