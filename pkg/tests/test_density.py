import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epsbeta.density import (
    OMEGA_SCALES, affine_clamped, beta_exponent, constant, direction_weighted, from_config, from_expressions,
    load_density, local_bounds, modulus_of_continuity, piecewise_constant, radial_holder, to_config,
)
from epsbeta.errors import InvalidDensity

from helpers import linear_g


@pytest.mark.parametrize("N", [2, 3, 4, 7])
def test_beta_endpoints(N):
    assert beta_exponent(0.0, N) == (N - 1) / N
    assert beta_exponent(1.0, N) == 1.0


def test_beta_half_in_plane():
    assert beta_exponent(0.5, 2) == pytest.approx(2 / 3, abs=1e-15)


@pytest.mark.parametrize("N", [2, 3, 4])
def test_beta_monotone_and_in_range(N):
    vals = [beta_exponent(a, N) for a in np.linspace(0, 1, 101)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert min(vals) >= (N - 1) / N and max(vals) <= 1.0


@pytest.mark.parametrize("alpha,N", [(-0.1, 2), (1.1, 2), (0.5, 1), (0.5, 2.5)])
def test_beta_rejects_bad_input(alpha, N):
    with pytest.raises(ValueError):
        beta_exponent(alpha, N)


def test_modulus_constant_is_zero():
    for t in (1e-3, 0.5, 2.0):
        assert modulus_of_continuity(constant(), (0.3, 0.4), t) == 0.0


def test_modulus_radial_attained_at_boundary():
    fld = radial_holder(center=(0.2, 0.7), alpha=1.0, amplitude=1.0, cap=1.0)
    assert modulus_of_continuity(fld, (0.2, 0.7), 0.5) == pytest.approx(0.5, abs=1e-12)


def test_modulus_anisotropy_only_is_zero():
    fld = from_expressions("1", "1 + 0.3*n1**2")
    assert modulus_of_continuity(fld, (0.0, 0.0), 0.7) == 0.0


def test_modulus_rejects_bad_t():
    with pytest.raises(ValueError):
        modulus_of_continuity(constant(), (0, 0), 0.0)


def test_local_bounds_trivial():
    lb = local_bounds(constant(), (0.0, 0.0))
    assert lb.M == 1.0 and lb.omega_limit == 0.0
    assert all(v == 0.0 for v in lb.omega_table.values())


def test_local_bounds_range_of_f():
    lb = local_bounds(from_expressions("1.75 + 1.25*x1", "1"), (0.0, 0.0))
    assert lb.M == pytest.approx(3.0)


@pytest.mark.parametrize("t", [0.25, 0.5])
def test_local_bounds_linear_modulus(t):
    lb = local_bounds(linear_g(), (0.5, 0.5))
    assert lb.omega_table[t] == pytest.approx(t, rel=0.1)


def test_local_bounds_invariants():
    lb = local_bounds(radial_holder(center=(0.1, 0.1), alpha=0.5), (0.0, 0.0))
    vals = [lb.omega_table[t] for t in sorted(lb.omega_table)]
    assert sorted(lb.omega_table) == sorted(OMEGA_SCALES)
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert lb.M >= 1 and 0 <= lb.omega_limit <= min(vals)
    assert lb.omega(0.3) == lb.omega_table[0.5]


def test_local_bounds_swap_f_and_g():
    e = "1 + 0.8*sin(3*x1) * cos(2*x2)"
    a = local_bounds(from_expressions(e, "1"), (0.2, -0.1))
    b = local_bounds(from_expressions("1", e), (0.2, -0.1))
    assert a.M == pytest.approx(b.M, rel=1e-12)


def test_local_bounds_rejects_few_probes():
    with pytest.raises(ValueError):
        local_bounds(constant(), (0, 0), probes=1)


@settings(max_examples=25, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_modulus_monotone_in_t(x, y, t1, t2):
    lo, hi = sorted((t1, t2))
    # affine g: the sup sits on the sphere layer, so sampling is exact
    aff = affine_clamped(g_grad=(0.3, 0.2), lo=0.1, hi=10.0)
    assert modulus_of_continuity(aff, (x, y), lo) <= modulus_of_continuity(aff, (x, y), hi) + 1e-12
    # smooth g: sampled sups are lower bounds, monotone up to sampling error
    smooth = from_expressions("1", "2 + sin(3*x1)*cos(2*x2)")
    assert modulus_of_continuity(smooth, (x, y), lo) <= 1.05 * modulus_of_continuity(smooth, (x, y), hi) + 1e-12


@pytest.mark.parametrize("alpha", [0.25, 0.5, 1.0])
def test_holder_families_respect_declared_constant(alpha):
    fld = radial_holder(center=(0.0, 0.0), alpha=alpha, amplitude=0.7, cap=5.0)
    for t in (1 / 64, 1 / 8, 1 / 2):
        assert modulus_of_continuity(fld, (0.0, 0.0), t) <= fld.holder_constant * t ** alpha + 1e-12
        # off-centre balls have diameter 2t
        assert modulus_of_continuity(fld, (0.3, 0.4), t) <= fld.holder_constant * (2 * t) ** alpha + 1e-12


def test_families_evaluate_positively():
    pts = np.random.default_rng(0).uniform(-2, 2, (50, 2))
    nrm = np.tile([0.0, 1.0], (50, 1))
    for fld in (constant(2.0, 0.5), affine_clamped(g_grad=(0.3, 0.1)), radial_holder(),
                piecewise_constant(), direction_weighted(c=0.5)):
        assert (fld.f(pts) > 0).all() and (fld.g(pts, nrm) > 0).all()


def test_direction_weighted_is_asymmetric():
    fld = direction_weighted(c=0.5, u=(1.0, 0.0))
    x = np.zeros((1, 2))
    assert fld.g(x, np.array([[1.0, 0.0]]))[0] == pytest.approx(1.5)
    assert fld.g(x, np.array([[-1.0, 0.0]]))[0] == pytest.approx(0.5)
    assert fld.g_symmetric(x, np.array([[1.0, 0.0]]))[0] == pytest.approx(1.0)
    with pytest.raises(InvalidDensity):
        direction_weighted(c=1.0)


def test_piecewise_constant_takes_lower_value_on_the_jump():
    fld = piecewise_constant(threshold=0.5, g_values=(1.0, 2.0))
    assert fld.g(np.array([[0.5, 0.0]]), np.array([[1.0, 0.0]]))[0] == 1.0
    assert not fld.continuous and local_bounds(fld, (0.5, 0.0)).may_undershoot


def test_nonpositive_density_is_rejected():
    fld = from_expressions("x1", "1")
    with pytest.raises(InvalidDensity):
        fld.f(np.array([[-1.0, 0.0]]))


@pytest.mark.parametrize("src", ["__import__('os')", "x1.real", "'a'", "foo(x1)", "1 +"])
def test_expression_grammar_rejects(src):
    with pytest.raises(InvalidDensity):
        from_expressions(src, "1")


def test_expression_vectors():
    fld = from_expressions("1 + norm(x)", "1 + 0.5*dot(n, [1, 0])")
    x = np.array([[3.0, 4.0]])
    assert fld.f(x)[0] == pytest.approx(6.0)
    assert fld.g(x, np.array([[1.0, 0.0]]))[0] == pytest.approx(1.5)


def test_config_round_trip(tmp_path):
    for fld in (radial_holder(center=(0.5, 0.5), alpha=0.5), from_expressions("1", "2 + x2", alpha=0.0)):
        p = tmp_path / "d.json"
        p.write_text(json.dumps(to_config(fld)))
        back = load_density(p)
        pts = np.random.default_rng(1).uniform(0, 1, (20, 2))
        nrm = np.tile([0.0, 1.0], (20, 1))
        assert np.allclose(back.g(pts, nrm), fld.g(pts, nrm)) and back.alpha == fld.alpha
    with pytest.raises(InvalidDensity):
        from_config({"family": "nope"})
    with pytest.raises(InvalidDensity):
        from_config({"family": "constant", "params": {"bogus": 1}})
    with pytest.raises(InvalidDensity):
        from_config({})


def test_omega_scales_are_dyadic():
    assert min(OMEGA_SCALES) == 1 / 64 and max(OMEGA_SCALES) == 1.0
    assert all(math.log2(t).is_integer() for t in OMEGA_SCALES)
