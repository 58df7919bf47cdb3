import itertools
import math
from fractions import Fraction

import numpy as np
import pytest

from ambientlab.chart_geometry import geometry
from ambientlab.errors import CapabilityError
from ambientlab.fg_expansion import solve_expansion
from ambientlab.metric_zoo import builtin_metric, random_jet_metric
from ambientlab.volume_coeffs import (
    G_TABLE,
    V_TABLE,
    check_tables,
    linearization_coefficients,
    schouten_endomorphism,
    sigma_and_newton,
    sigma_trace_forms,
    volume_coefficients,
    volume_coefficients_direct,
)


def test_sphere_volume_coefficients_are_binomial():
    s = solve_expansion(builtin_metric("sphere", {}, [0.0] * 5, 8, 5), 3)
    v = volume_coefficients(s, 3).values()
    assert np.allclose(v, [2.5, 2.5, 1.25], rtol=1e-12)


def test_log_derivative_and_direct_determinant_agree():
    s = solve_expansion(random_jet_metric(5, 8, seed=31), 3)
    assert np.allclose(volume_coefficients(s, 3).values(), volume_coefficients_direct(s, 3), rtol=1e-11, atol=0)


def test_first_two_coefficients_are_sigma_one_and_two():
    g = random_jet_metric(5, 6, seed=32)
    vol = volume_coefficients(solve_expansion(g, 2), 2)
    geo = geometry(g, False)
    sv = sigma_and_newton(schouten_endomorphism(geo.P, geo.ginv))
    assert float(vol.v[1].value) == pytest.approx(float(sv.sigma[1].value), rel=1e-11)
    assert float(vol.v[2].value) == pytest.approx(float(sv.sigma[2].value), rel=1e-10)


def test_even_dimension_gate():
    s = solve_expansion(random_jet_metric(4, 6, seed=1), 2)
    volume_coefficients(s, 2)
    with pytest.raises(CapabilityError, match="k exceeds n/2"):
        volume_coefficients(s, 3)


def test_newton_identities_match_eigenvalue_symmetric_functions():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(4, 4))
    A = a + a.T
    sv = sigma_and_newton(A)
    lam = np.linalg.eigvalsh(A)
    for k in range(5):
        expect = sum(np.prod(c) for c in itertools.combinations(lam, k))
        assert float(sv.sigma[k].value) == pytest.approx(expect, rel=1e-11, abs=1e-11)
    # Cayley-Hamilton: T_(n-1) A = sigma_n I
    Tn = np.asarray(sv.T[3].value) @ A
    assert np.allclose(Tn, float(sv.sigma[4].value) * np.eye(4), atol=1e-10)


def test_trace_forms_agree_with_newton_recursion():
    g = random_jet_metric(5, 3, seed=4)
    geo = geometry(g, False)
    sv = sigma_and_newton(schouten_endomorphism(geo.P, geo.ginv))
    for k, form in enumerate(sigma_trace_forms(geo.P, geo.ginv), start=1):
        assert np.allclose(form.coeffs, sv.sigma[k].coeffs, atol=1e-14)


def test_linearization_first_two():
    g = random_jet_metric(5, 6, seed=6)
    vol = volume_coefficients(solve_expansion(g, 2), 2)
    geo = geometry(g, False)
    sv = sigma_and_newton(schouten_endomorphism(geo.P, geo.ginv))
    assert np.allclose(linearization_coefficients(vol, 1).value, -geo.ginv.value, atol=1e-14)
    assert np.allclose(linearization_coefficients(vol, 2).value, -sv.T_up(geo.ginv, 1).value, atol=1e-12)


def test_tables_have_consistent_weights():
    check_tables()
    assert G_TABLE[1] == [(Fraction(1), ("P",))]
    assert set(V_TABLE) == {1, 2, 3, 4}
