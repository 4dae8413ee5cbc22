"""Volume and perimeter densities, their local bounds and moduli of continuity.

A :class:`DensityField` bundles a volume density ``f(x)`` and a perimeter
density ``g(x, nu)``. Both evaluators are vectorized: ``f`` takes points of
shape ``(K, N)`` and ``g`` takes points and unit normals of the same shape.

Suprema such as ``M_x`` and ``omega_x(t)`` are estimated from a seeded Sobol
sample, so they are deterministic lower bounds of the true values.
"""

from __future__ import annotations

import ast
import functools
import json
import math
import operator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
from scipy.stats import norm as _gauss
from scipy.stats import qmc

from .errors import InvalidDensity

FEval = Callable[[np.ndarray], np.ndarray]
GEval = Callable[[np.ndarray, np.ndarray], np.ndarray]

# dyadic scales t = 2^-k of the omega table
OMEGA_SCALES = tuple(2.0 ** -k for k in range(7))


@dataclass(frozen=True, eq=False)
class DensityField:
    """Volume density ``f`` and perimeter density ``g`` with Hölder metadata.

    Attributes:
        f_eval: vectorized ``f(points)``.
        g_eval: vectorized ``g(points, normals)``.
        alpha: declared Hölder exponent of ``g`` in its first variable.
        family_tag: built-in family name or ``"custom expression"``.
        holder_constant: declared ``C_H`` with ``|g(y,nu)-g(z,nu)| <= C_H |y-z|^alpha``.
        continuous: ``False`` for families with jumps, where sampled suprema may undershoot.
        params: family parameters as given.
    """

    f_eval: FEval
    g_eval: GEval
    alpha: float = 0.0
    family_tag: str = "custom expression"
    holder_constant: float | None = None
    continuous: bool = True
    params: dict = field(default_factory=dict)

    def f(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.broadcast_to(np.asarray(self.f_eval(pts), dtype=float), (len(pts),))
        _check_positive(out, "f")
        return out

    def g(self, points, normals) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        nrm = np.broadcast_to(np.atleast_2d(np.asarray(normals, dtype=float)), pts.shape)
        out = np.broadcast_to(np.asarray(self.g_eval(pts, nrm), dtype=float), (len(pts),))
        _check_positive(out, "g")
        return out

    def g_symmetric(self, points, normals) -> np.ndarray:
        """``(g(x, nu) + g(x, -nu)) / 2``."""
        normals = np.asarray(normals, dtype=float)
        return 0.5 * (self.g(points, normals) + self.g(points, -normals))

    def symmetrized(self) -> "DensityField":
        """The field with ``g`` replaced by its even part in ``nu``."""
        g = self.g_eval
        return DensityField(self.f_eval, lambda x, n: 0.5 * (g(x, n) + g(x, -n)), self.alpha,
                            self.family_tag + "+symmetrized", self.holder_constant, self.continuous, self.params)

    def scaled(self, f_factor: float = 1.0, g_factor: float = 1.0) -> "DensityField":
        f, g = self.f_eval, self.g_eval
        hc = None if self.holder_constant is None else self.holder_constant * g_factor
        return DensityField(lambda x: f_factor * f(x), lambda x, n: g_factor * g(x, n), self.alpha,
                            self.family_tag, hc, self.continuous, self.params)


def _check_positive(values: np.ndarray, name: str):
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise InvalidDensity(f"{name} must be finite and positive on the working domain")


# -- built-in families ---------------------------------------------------

def constant(f: float = 1.0, g: float = 1.0) -> DensityField:
    return DensityField(lambda x: np.full(len(x), float(f)), lambda x, n: np.full(len(x), float(g)),
                        alpha=1.0, family_tag="constant", holder_constant=0.0,
                        params={"f": f, "g": g})


def affine_clamped(f0: float = 1.0, f_grad=(0.0,), g0: float = 1.0, g_grad=(0.0,),
                   lo: float = 0.5, hi: float = 2.0) -> DensityField:
    """``clip(c0 + <grad, x>, lo, hi)`` for both densities; Lipschitz with constant ``|grad|``."""
    fg = np.asarray(f_grad, dtype=float)
    gg = np.asarray(g_grad, dtype=float)

    def lin(c0, grad, x):
        gr = np.zeros(x.shape[1])
        gr[:min(len(grad), len(gr))] = grad[:len(gr)]
        return np.clip(c0 + x @ gr, lo, hi)

    return DensityField(lambda x: lin(f0, fg, x), lambda x, n: lin(g0, gg, x), alpha=1.0,
                        family_tag="affine_clamped", holder_constant=float(np.linalg.norm(gg)),
                        params={"f0": f0, "f_grad": list(fg), "g0": g0, "g_grad": list(gg), "lo": lo, "hi": hi})


def radial_holder(center=(0.0, 0.0), alpha: float = 1.0, amplitude: float = 1.0, cap: float = 1.0,
                  g0: float = 1.0, f0: float = 1.0, in_f: bool = False) -> DensityField:
    """``g(x, nu) = g0 + amplitude * min(|x - center|, cap)^alpha``.

    The radial profile is ``alpha``-Hölder with constant ``amplitude``. With
    ``in_f`` the same profile (based at ``f0``) is used for ``f``.
    """
    c = np.asarray(center, dtype=float)

    def prof(x, base):
        cc = np.zeros(x.shape[1])
        cc[:min(len(c), len(cc))] = c[:len(cc)]
        r = np.minimum(np.linalg.norm(x - cc, axis=1), cap)
        return base + amplitude * r ** alpha

    fe = (lambda x: prof(x, f0)) if in_f else (lambda x: np.full(len(x), float(f0)))
    return DensityField(fe, lambda x, n: prof(x, g0), alpha=float(alpha), family_tag="radial_holder",
                        holder_constant=abs(float(amplitude)),
                        params={"center": list(c), "alpha": alpha, "amplitude": amplitude, "cap": cap,
                                "g0": g0, "f0": f0, "in_f": in_f})


def piecewise_constant(axis: int = 0, threshold: float = 0.0, f_values=(1.0, 1.0),
                       g_values=(1.0, 2.0)) -> DensityField:
    """Two values split by the hyperplane ``x[axis] = threshold``.

    On the hyperplane the smaller value is taken, which keeps both densities
    lower semicontinuous.
    """
    def pw(x, vals):
        t = x[:, axis]
        lo_v, hi_v = vals
        out = np.where(t < threshold, lo_v, hi_v).astype(float)
        return np.where(t == threshold, min(lo_v, hi_v), out)

    return DensityField(lambda x: pw(x, f_values), lambda x, n: pw(x, g_values), alpha=0.0,
                        family_tag="piecewise_constant", continuous=False,
                        params={"axis": axis, "threshold": threshold, "f_values": list(f_values),
                                "g_values": list(g_values)})


def direction_weighted(c: float = 0.5, u=(1.0, 0.0), h0: float = 1.0, slope=(0.0,), f0: float = 1.0) -> DensityField:
    """``g(x, nu) = h(x) (1 + c <nu, u>)`` with ``h(x) = h0 + <slope, x>`` and ``|c| < 1``."""
    if not -1.0 < c < 1.0:
        raise InvalidDensity("direction weight c must lie in (-1, 1)")
    uu = np.asarray(u, dtype=float)
    uu = uu / np.linalg.norm(uu)
    sl = np.asarray(slope, dtype=float)

    def pad(v, n):
        out = np.zeros(n)
        out[:min(len(v), n)] = v[:n]
        return out

    def g(x, n):
        h = h0 + x @ pad(sl, x.shape[1])
        return h * (1.0 + c * (n @ pad(uu, x.shape[1])))

    lip = float(np.linalg.norm(sl)) * (1 + abs(c))
    return DensityField(lambda x: np.full(len(x), float(f0)), g, alpha=1.0, family_tag="direction_weighted",
                        holder_constant=lip, params={"c": c, "u": list(uu), "h0": h0, "slope": list(sl), "f0": f0})


FAMILIES: dict[str, Callable[..., DensityField]] = {
    "constant": constant,
    "affine_clamped": affine_clamped,
    "radial_holder": radial_holder,
    "piecewise_constant": piecewise_constant,
    "direction_weighted": direction_weighted,
}


# -- expression grammar ----------------------------------------------------

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}


def _vec_norm(v):
    return np.linalg.norm(v, axis=-1) if np.ndim(v) == 2 else np.abs(v)


def _vec_dot(u, v):
    return np.sum(np.asarray(u) * np.asarray(v), axis=-1)


_FUNCS = {
    "abs": np.abs, "sqrt": np.sqrt, "exp": np.exp, "log": np.log, "sin": np.sin, "cos": np.cos,
    "min": lambda *a: np.minimum.reduce(np.broadcast_arrays(*a)),
    "max": lambda *a: np.maximum.reduce(np.broadcast_arrays(*a)),
    "pow": np.power, "norm": _vec_norm, "dot": _vec_dot,
}


class Expression:
    """A parsed arithmetic expression over ``x1..xN``, ``n1..nN`` and the vectors ``x``, ``n``.

    Supports ``+ - * / **``, numeric constants, ``pi``, list literals as
    vectors, and the functions abs, sqrt, exp, log, sin, cos, min, max, pow,
    norm and dot.
    """

    def __init__(self, source: str):
        self.source = source
        try:
            self.tree = ast.parse(source, mode="eval")
        except SyntaxError as exc:
            raise InvalidDensity(f"cannot parse expression {source!r}: {exc.msg}") from None
        self._validate(self.tree.body)

    def _validate(self, node):
        allowed = (ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Constant, ast.List, ast.Tuple, ast.Load,
                   ast.USub, ast.UAdd, *(_BINOPS))
        for sub in ast.walk(node):
            if not isinstance(sub, allowed) and not isinstance(sub, tuple(_BINOPS)):
                raise InvalidDensity(f"unsupported syntax {type(sub).__name__} in {self.source!r}")
            if isinstance(sub, ast.Call) and not (isinstance(sub.func, ast.Name) and sub.func.id in _FUNCS):
                raise InvalidDensity(f"unknown function in {self.source!r}")
            if isinstance(sub, ast.Constant) and not isinstance(sub.value, (int, float)):
                raise InvalidDensity(f"only numeric constants are allowed in {self.source!r}")

    def __call__(self, x: np.ndarray, n: np.ndarray | None = None) -> np.ndarray:
        env = {"x": x, "pi": math.pi}
        for k in range(x.shape[1]):
            env[f"x{k + 1}"] = x[:, k]
        if n is not None:
            env["n"] = n
            for k in range(n.shape[1]):
                env[f"n{k + 1}"] = n[:, k]
        val = self._eval(self.tree.body, env, len(x))
        return np.broadcast_to(np.asarray(val, dtype=float), (len(x),))

    def _eval(self, node, env, k):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id in _FUNCS or node.id not in env:
                raise InvalidDensity(f"unknown name {node.id!r} in {self.source!r}")
            return env[node.id]
        if isinstance(node, ast.UnaryOp):
            v = self._eval(node.operand, env, k)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env, k), self._eval(node.right, env, k))
        if isinstance(node, (ast.List, ast.Tuple)):
            parts = [np.broadcast_to(np.asarray(self._eval(e, env, k), dtype=float), (k,)) for e in node.elts]
            return np.stack(parts, axis=-1)
        args = [self._eval(a, env, k) for a in node.args]
        return _FUNCS[node.func.id](*args)


def from_expressions(expression_f: str, expression_g: str, alpha: float = 0.0,
                     holder_constant: float | None = None) -> DensityField:
    ef, eg = Expression(expression_f), Expression(expression_g)
    return DensityField(lambda x: ef(x), lambda x, n: eg(x, n), alpha=float(alpha),
                        holder_constant=holder_constant,
                        params={"expression_f": expression_f, "expression_g": expression_g})


def from_config(cfg: dict[str, Any]) -> DensityField:
    """Build a field from ``{"family", "params", "alpha"}`` or ``{"expression_f", "expression_g"}``."""
    if "family" in cfg:
        fam = cfg["family"]
        if fam not in FAMILIES:
            raise InvalidDensity(f"unknown density family {fam!r}")
        try:
            fld = FAMILIES[fam](**cfg.get("params", {}))
        except TypeError as exc:
            raise InvalidDensity(f"bad parameters for {fam}: {exc}") from None
        if "alpha" in cfg:
            fld = DensityField(fld.f_eval, fld.g_eval, float(cfg["alpha"]), fld.family_tag,
                               fld.holder_constant, fld.continuous, fld.params)
        return fld
    if "expression_f" in cfg or "expression_g" in cfg:
        return from_expressions(cfg.get("expression_f", "1"), cfg.get("expression_g", "1"),
                                cfg.get("alpha", 0.0), cfg.get("holder_constant"))
    raise InvalidDensity("density config needs 'family' or 'expression_f'/'expression_g'")


def load_density(path: str | Path) -> DensityField:
    return from_config(json.loads(Path(path).read_text()))


def to_config(fld: DensityField) -> dict[str, Any]:
    if fld.family_tag in FAMILIES:
        return {"family": fld.family_tag, "params": fld.params, "alpha": fld.alpha}
    return {**fld.params, "alpha": fld.alpha}


# -- exponents, bounds and moduli ----------------------------------------------

def beta_exponent(alpha: float, N: int) -> float:
    """``(alpha + (N-1)(1-alpha)) / (alpha + N(1-alpha))``, in ``[(N-1)/N, 1]``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if int(N) != N or N < 2:
        raise ValueError("N must be an integer >= 2")
    if alpha == 0.0:
        return (N - 1) / N
    if alpha == 1.0:
        return 1.0
    return (alpha + (N - 1) * (1 - alpha)) / (alpha + N * (1 - alpha))


@functools.lru_cache(maxsize=64)
def _sobol(dim: int, count: int, seed: int) -> np.ndarray:
    eng = qmc.Sobol(d=dim, scramble=True, seed=seed)
    m = max(1, math.ceil(math.log2(max(count, 2))))
    out = eng.random_base2(m)[:count]
    out.setflags(write=False)
    return out


def _ball_points(x: np.ndarray, t: float, count: int, seed: int) -> np.ndarray:
    """Deterministic points of the closed ball: center, axis extremes, a sphere layer and a Sobol fill."""
    N = len(x)
    rad, d = _unit_ball_fill(N, count, seed)
    eye = np.eye(N)
    return np.vstack([x[None], x + t * eye, x - t * eye, x + t * d, x + t * rad * d])


@functools.lru_cache(maxsize=64)
def _unit_ball_fill(N: int, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    u = np.clip(_sobol(N + 1, count, seed), 1e-12, 1 - 1e-12)
    d = _gauss.ppf(u[:, 1:])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rad = u[:, :1] ** (1.0 / N)
    rad.setflags(write=False)
    d.setflags(write=False)
    return rad, d


@functools.lru_cache(maxsize=64)
def _directions(N: int, count: int, seed: int) -> np.ndarray:
    u = np.clip(_sobol(N, count, seed + 1), 1e-12, 1 - 1e-12)
    d = _gauss.ppf(u)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    eye = np.eye(N)
    out = np.vstack([eye, -eye, d])
    out.setflags(write=False)
    return out


def modulus_of_continuity(fld: DensityField, x, t: float, probes: int = 1024, seed: int = 0,
                          directions: int = 32) -> float:
    """Sampled ``sup |g(y,nu) - g(z,nu)|`` over ``y, z`` in ``B(x, t)`` and unit ``nu``."""
    if not t > 0:
        raise ValueError("t must be positive")
    if probes < 2:
        raise ValueError("probes must be >= 2")
    x = np.asarray(x, dtype=float)
    pts = _ball_points(x, t, probes, seed)
    dirs = _directions(len(x), directions, seed)
    vals = _g_grid(fld, pts, dirs)
    return float((vals.max(axis=1) - vals.min(axis=1)).max())


def _g_grid(fld: DensityField, pts: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """``g`` at every (direction, point) pair, shaped ``(len(dirs), len(pts))``."""
    P = np.tile(pts, (len(dirs), 1))
    V = np.repeat(dirs, len(pts), axis=0)
    return fld.g(P, V).reshape(len(dirs), len(pts))


@dataclass(frozen=True)
class LocalBounds:
    center: tuple[float, ...]
    M: float
    omega_table: dict[float, float]
    omega_limit: float
    may_undershoot: bool = False

    def omega(self, t: float) -> float:
        """Table value at the smallest tabulated scale ``>= t`` (the sup over a larger ball)."""
        for s in sorted(self.omega_table):
            if s >= t:
                return self.omega_table[s]
        return self.omega_table[max(self.omega_table)]

    def to_dict(self) -> dict:
        return {"center": list(self.center), "M": self.M,
                "omega_table": {format(k, ".17g"): v for k, v in sorted(self.omega_table.items())},
                "omega_limit": self.omega_limit, "may_undershoot": self.may_undershoot}


def local_bounds(fld: DensityField, x, probes: int = 1024, seed: int = 0) -> LocalBounds:
    """Sampled ``M_x`` on ``B(x, 1)`` and the dyadic omega table ``t = 1, 1/2, ..., 1/64``."""
    if probes < 2:
        raise ValueError("probes must be >= 2")
    x = np.asarray(x, dtype=float)
    pts = _ball_points(x, 1.0, probes, seed)
    fv = fld.f(pts)
    M = max(1.0, float(fv.max()), float((1 / fv).max()))
    gv = _g_grid(fld, pts, _directions(len(x), 32, seed))
    M = max(M, float(gv.max()), float((1 / gv).max()))
    raw = [modulus_of_continuity(fld, x, t, probes, seed) for t in sorted(OMEGA_SCALES)]
    # a sup over nested balls is monotone; enforce it against sampling noise
    mono = np.maximum.accumulate(raw)
    table = {t: float(v) for t, v in zip(sorted(OMEGA_SCALES), mono)}
    return LocalBounds(tuple(map(float, x)), M, table, table[min(OMEGA_SCALES)], not fld.continuous)
