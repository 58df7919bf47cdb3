import math

import numpy as np
import pytest

from ambientlab import conformal_lab as lab
from ambientlab.chart_geometry import geometry
from ambientlab.errors import InputError, UsageError
from ambientlab.fg_expansion import solve_expansion
from ambientlab.metric_zoo import builtin_metric, flat_spec, random_conformal_factor, random_jet_metric, torus_spec
from ambientlab.volume_coeffs import volume_coefficients


@pytest.fixture(scope="module")
def g5():
    return random_jet_metric(5, 8, seed=51)


@pytest.fixture(scope="module")
def w5():
    return random_conformal_factor(5, 8, seed=52)


def test_compare_relative_error_and_scale():
    r = lab.compare("x", [1.0, 2.0], [1.0, 2.0 + 1e-9], 1e-8)
    assert r.passed and r.rel_err == pytest.approx(5e-10)
    z = lab.compare("z", 1e-20, -1e-20, 1e-8)
    assert not z.passed
    assert lab.compare("z", 1e-20, -1e-20, 1e-8, scale=1.0).passed
    d = lab.VariationReport("c", 0, 0, 1.0, 0.5, 1e-3, expect="differ")
    assert d.passed
    assert d.to_dict()["expect"] == "differ"


def test_rescaling_by_a_constant():
    g = random_jet_metric(4, 3, seed=1)
    c = lab.ConformalFactor.from_expression("0.25", ["x1", "x2", "x3", "x4"], [0.0] * 4, 3)
    gh = lab.conformal_rescale(g, c)
    assert np.allclose(gh.components.coeffs, math.exp(0.5) * g.components.coeffs)
    P, Ph = geometry(g, False).P, geometry(gh, False).P
    assert np.allclose(P.coeffs, Ph.coeffs, atol=1e-13)


def test_rescale_rejects_chart_mismatch():
    g = random_jet_metric(4, 3, seed=1)
    with pytest.raises(InputError):
        lab.conformal_rescale(g, random_conformal_factor(3, 3, seed=1))


@pytest.mark.parametrize("law,k", [("schouten", 1), ("bach", 1), ("omega_full", 1), ("omega_full", 2),
                                   ("omega_linear", 1), ("omega_linear", 2)])
def test_transformation_laws(g5, w5, law, k):
    rep = lab.transformation_law_check(g5, w5, law, k, tol=1e-9)
    assert rep.passed, rep.rel_err


def test_unknown_law():
    with pytest.raises(UsageError):
        lab.transformation_law_check(random_jet_metric(5, 6), random_conformal_factor(5, 6), "ricci")


def test_variation_of_expansion(g5, w5):
    rep = lab.variation_of_expansion(g5, w5, 3, 1e-9)
    assert rep.passed, rep.rel_err
    assert rep.Y is not None


def test_flat_vector_field():
    g = builtin_metric("conf_flat", {"seed": 2}, [0.1] * 4, 6, 4)
    rep = lab.flat_vector_field_check(g, random_conformal_factor(4, 6, seed=3), 2)
    assert rep.passed, rep.rel_err


@pytest.mark.parametrize("k", [1, 2, 3])
def test_variation_of_volume_coefficients(g5, w5, k):
    rep = lab.variation_of_volume_coefficients(g5, w5, k, 1e-9)
    assert rep.passed, rep.rel_err


def test_variation_agrees_with_finite_differences(g5, w5):
    h = 1e-4
    jet = float(lab.variation_of_volume_coefficients(g5, w5, 2).lhs.value)

    def v2(s):
        return float(volume_coefficients(solve_expansion(lab.conformal_rescale(g5, w5 * s), 2), 2).v[2].value)

    fd = (v2(h) - v2(-h)) / (2 * h)
    assert jet == pytest.approx(fd, rel=1e-6)


def test_lcf_delta_sigma():
    g = builtin_metric("conf_flat", {"seed": 1}, [0.1] * 5, 6, 5)
    assert lab.lcf_variation_check(g, random_conformal_factor(5, 6, seed=5), 2).passed


def test_second_jet_dependence_and_control():
    g, w = random_jet_metric(5, 6, seed=61), random_conformal_factor(5, 6, seed=62)
    rep = lab.second_jet_dependence_check(g, w, 2, trials=3, seed=1)
    assert rep.passed, rep.rel_err
    ctl = lab.second_jet_dependence_check(g, w, 2, trials=3, seed=1, control=True)
    assert ctl.passed and ctl.rel_err > 1e-3


def test_flat_torus_values_vanish():
    spec = lab.TorusSpec(flat_spec(3), "0.2*sin(x1)", 4)
    vals = lab.torus_node_values(spec, 1)
    assert vals["v"].shape == (64,)
    assert np.abs(vals["v"]).max() == 0.0


def test_torus_functional_gradient_coarse_grid():
    spec = lab.TorusSpec(torus_spec(3, seed=3), "0.3*sin(x1)*cos(x2) + 0.2*cos(x3)", 8)
    rep = lab.functional_gradient_check(spec, 1, tol=1e-5)
    assert rep.passed, rep.rel_err
    assert "integral_vk" in rep.details


def test_torus_grid_dimension_mismatch():
    with pytest.raises(InputError):
        lab.TorusSpec(flat_spec(3), "0", (4, 4))


def test_default_jobs_reads_environment(monkeypatch):
    monkeypatch.setenv("AMBIENTLAB_JOBS", "3")
    assert lab.default_jobs() == 3
