import math

import numpy as np
import pytest

from ambientlab.errors import SingularInputError
from ambientlab.jets import Jet, JetMatrix, JetSpace, einsum, jet_matrix_inverse, remap


def taylor(space, f_coeffs):
    return Jet(space, np.asarray(f_coeffs, dtype=float))


def test_space_sizes_and_caps():
    s = JetSpace.get(2, 3)
    assert s.size == math.comb(2 + 3, 3)
    capped = JetSpace.get(3, 4, caps=[((2,), 1)])
    assert all(e[2] <= 1 for e in capped.exponents)
    # weight-0 variables do not count toward the total order
    weighted = JetSpace.get(2, 2, weights=[1, 0], caps=[((1,), 1)])
    assert (2, 1) in {tuple(e) for e in weighted.exponents}
    assert JetSpace.get(2, 3) is s


def test_product_matches_polynomial_multiplication():
    s = JetSpace.get(2, 4)
    x, y = Jet.variable(s, 0), Jet.variable(s, 1)
    p = (1.0 + x + 2.0 * y) * (x - y)
    assert p.coefficient((2, 0)) == pytest.approx(1.0)
    assert p.coefficient((1, 1)) == pytest.approx(1.0)
    assert p.coefficient((0, 2)) == pytest.approx(-2.0)
    assert p.coefficient((1, 0)) == pytest.approx(1.0)


def test_analytic_functions_match_taylor_series():
    s = JetSpace.get(1, 8)
    x = Jet.variable(s, 0, base=0.3)
    e = x.exp()
    for k in range(9):
        assert e.coefficient((k,)) == pytest.approx(math.exp(0.3) / math.factorial(k), rel=1e-13)
    t = x.sin() ** 2 + x.cos() ** 2
    assert np.allclose(t.coeffs, Jet.constant(s, 1.0).coeffs, atol=1e-14)
    r = (1.0 / x) * x
    assert np.allclose(r.coeffs, Jet.constant(s, 1.0).coeffs, atol=1e-15 * 0.3 ** -8)
    assert np.allclose((x.log().exp()).coeffs, x.coeffs, atol=1e-13)
    assert np.allclose((x.sqrt() * x.sqrt()).coeffs, x.coeffs, atol=1e-13)


def test_partial_and_integrate_invert_each_other():
    s = JetSpace.get(2, 5)
    x, y = Jet.variable(s, 0, 0.2), Jet.variable(s, 1, -0.1)
    f = (x * y).exp() + x ** 3
    d = f.partial(0)
    # d/dx of (x*y).exp() at the base point
    assert float(d.value) == pytest.approx(-0.1 * math.exp(-0.02) + 3 * 0.04, rel=1e-13)
    g = Jet.variable(s, 0) * Jet.variable(s, 1) + Jet.variable(s, 1) ** 2
    back = g.partial(0).integrate(0)
    assert back.coefficient((1, 1)) == pytest.approx(1.0)
    assert back.coefficient((0, 2)) == pytest.approx(0.0)


def test_multivariate_chain_rule_against_finite_difference():
    s = JetSpace.get(2, 3)
    x, y = Jet.variable(s, 0, 0.4), Jet.variable(s, 1, 0.7)
    f = (x.sin() * y + y.exp() / (1.0 + x * x)).log()
    fn = lambda a, b: math.log(math.sin(a) * b + math.exp(b) / (1 + a * a))
    h = 1e-5
    fd = (fn(0.4 + h, 0.7 + h) - fn(0.4 + h, 0.7 - h) - fn(0.4 - h, 0.7 + h) + fn(0.4 - h, 0.7 - h)) / (4 * h * h)
    assert f.coefficient((1, 1)) == pytest.approx(fd, rel=1e-5)


def test_remap_fixes_and_renames_variables():
    s = JetSpace.get(2, 3)
    x, y = Jet.variable(s, 0), Jet.variable(s, 1)
    f = x * x * y + 3.0 * y + x
    t = JetSpace.get(1, 3)
    coef_y1 = remap(f, t, {0: 0}, {1: 1})
    assert coef_y1.coefficient((2,)) == pytest.approx(1.0)
    assert coef_y1.coefficient((0,)) == pytest.approx(3.0)


def test_einsum_and_matrix_inverse():
    s = JetSpace.get(2, 3)
    x, y = Jet.variable(s, 0), Jet.variable(s, 1)
    one = Jet.constant(s, 1.0)
    m = Jet(s, np.zeros((s.size, 2, 2)))
    m = einsum("...,ij->...ij", one, np.eye(2)) + einsum("...,ij->...ij", x * 0.3 + y * y, np.array([[1.0, 0.5], [0.5, 2.0]]))
    inv = jet_matrix_inverse(JetMatrix.symmetrized(m)).entries
    prod = einsum("...ij,...jk->...ik", m, inv)
    assert np.allclose(prod.coeffs, einsum("...,ij->...ij", one, np.eye(2)).coeffs, atol=1e-13)


def test_singular_matrix_is_rejected():
    s = JetSpace.get(1, 2)
    m = Jet.constant(s, np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SingularInputError):
        jet_matrix_inverse(m)
