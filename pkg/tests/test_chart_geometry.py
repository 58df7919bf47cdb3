import numpy as np
import pytest

from ambientlab.chart_geometry import covariant_derivative, geometry
from ambientlab.jets import einsum
from ambientlab.metric_zoo import builtin_metric, random_jet_metric


def rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-300))


def test_sphere_curvature_is_constant_one():
    g = builtin_metric("sphere", {}, [0.2, -0.4, 0.1, 0.3], 4, 4)
    geo = geometry(g, False)
    gv = g.components.value
    assert rel(geo.P.value, 0.5 * gv) < 1e-12
    assert float(np.abs(geo.W.value).max()) < 1e-12
    assert float(geo.J.value) == pytest.approx(2.0, rel=1e-12)


def test_flat_metric_has_zero_curvature():
    g = builtin_metric("flat", {}, [0.0] * 3, 3, 3)
    rm = geometry(g, False).curvature.riemann.jet
    assert float(np.abs(rm.coeffs).max()) == 0.0


def test_conformally_flat_metric_has_zero_weyl_and_cotton():
    g = builtin_metric("conf_flat", {"seed": 3}, [0.1] * 5, 4, 5)
    geo = geometry(g, False)
    scale = float(np.abs(geo.P.value).max())
    assert float(np.abs(geo.W.value).max()) < 1e-12 * scale
    assert float(np.abs(geo.C.value).max()) < 1e-12 * scale


def test_riemann_symmetries_and_bianchi():
    g = random_jet_metric(4, 4, seed=1)
    geo = geometry(g, False)
    R = geo.curvature.riemann.jet.value
    assert np.abs(R + R.transpose(1, 0, 2, 3)).max() < 1e-14
    assert np.abs(R - R.transpose(2, 3, 0, 1)).max() < 1e-14
    assert np.abs(R + R.transpose(0, 2, 3, 1) + R.transpose(0, 3, 1, 2)).max() < 1e-14


def test_contracted_bianchi_identity():
    g = random_jet_metric(5, 5, seed=2)
    geo = geometry(g, False)
    dP = geo.nabla(geo.P, "dd").value
    dJ = geo.nabla(geo.J, "").value
    div = np.einsum("jk,ijk->i", geo.ginv.value, dP)
    assert rel(div, dJ) < 1e-12


def test_weyl_is_trace_free():
    g = random_jet_metric(5, 4, seed=4)
    geo = geometry(g, False)
    tr = np.einsum("ik,ijkl->jl", geo.ginv.value, geo.W.value)
    assert np.abs(tr).max() < 1e-14


def test_covariant_derivative_of_metric_vanishes():
    g = random_jet_metric(4, 3, seed=5)
    geo = geometry(g, False)
    dg = covariant_derivative(g.components, geo.conn, ("d", "d")).jet
    assert float(np.abs(dg.value).max()) < 1e-14


def test_christoffel_symbols_against_finite_differences():
    pt = np.array([0.3, -0.2, 0.5])
    g = builtin_metric("sphere", {}, list(pt), 3, 3)
    gam = geometry(g, False).conn.gamma.value

    def metric(p):
        return 4.0 / (1.0 + p @ p) ** 2 * np.eye(3)

    h = 1e-6
    dg = np.stack([(metric(pt + h * e) - metric(pt - h * e)) / (2 * h) for e in np.eye(3)])
    gi = np.linalg.inv(metric(pt))
    # Gamma^k_ij = g^kl (d_i g_jl + d_j g_il - d_l g_ij) / 2
    fd = 0.5 * np.einsum("kl,ijl->kij", gi, dg.transpose(0, 1, 2) + dg.transpose(1, 0, 2) - dg.transpose(1, 2, 0))
    assert rel(gam, fd) < 1e-8
