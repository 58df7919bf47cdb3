import math

import numpy as np
import pytest

from ambientlab.chart_geometry import geometry
from ambientlab.errors import CapabilityError, InsufficientOrderError
from ambientlab.fg_expansion import (
    ambient_ricci,
    assemble_ambient,
    closed_form_series,
    obstruction_residual,
    series_residuals,
    solve_expansion,
)
from ambientlab.jets import einsum
from ambientlab.metric_zoo import builtin_metric, instantiate_jets, random_jet_metric, torus_spec


def rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-300))


def test_first_coefficient_is_twice_schouten():
    g = random_jet_metric(4, 4, seed=3)
    s = solve_expansion(g, 1)
    assert rel(s.coefficient(1).coeffs, (geometry(g, False).P * 2.0).coeffs) < 1e-11


def test_second_coefficient_formula_n5():
    g = random_jet_metric(5, 4, seed=3)
    s = solve_expansion(g, 2, top_order=0)
    geo = geometry(g)
    PP = einsum("...ik,...kl,...lj->...ij", geo.P, geo.ginv, geo.P)
    assert rel(s.value(2), (geo.B * (2.0 / (4 - 5)) + PP * 2.0).value) < 1e-10


def test_sphere_expansion_terminates():
    g = builtin_metric("sphere", {}, [0.1, 0.2, -0.1], 8, 3)
    s = solve_expansion(g, 3)
    c = closed_form_series(g, 3)
    gv = g.components.value
    assert rel(s.value(1), gv) < 1e-12
    assert rel(s.value(2), 0.5 * gv) < 1e-12
    assert np.abs(s.value(3)).max() < 1e-11
    assert np.abs(s.value(3) - c.value(3)).max() < 1e-11


def test_einstein_equations_hold_in_odd_dimension():
    g = random_jet_metric(3, 8, seed=9)
    s = solve_expansion(g, 3)
    scale = max(float(np.abs(s.value(k)).max()) for k in range(1, 4))
    res = series_residuals(s, 0) + series_residuals(s, 0, "rr")
    assert max(res) < 1e-11 * scale


def test_ambient_ricci_vanishes():
    g = random_jet_metric(5, 8, seed=11)
    s = solve_expansion(g, 3)
    amb = assemble_ambient(s, 2)
    ric = ambient_ricci(amb).value
    assert np.abs(ric).max() < 1e-10


def test_even_dimension_stops_at_half():
    g = random_jet_metric(4, 6, seed=2)
    with pytest.raises(CapabilityError):
        solve_expansion(g, 3)
    s = solve_expansion(g, 2)
    geo = geometry(g)
    pp = einsum("...ia,...jb,...ab,...ij->...", geo.ginv, geo.ginv, geo.P, geo.P)
    assert float(s.even_trace.value) == pytest.approx(2.0 * float(pp.value), rel=1e-10)


def test_obstruction_is_a_multiple_of_bach_in_dimension_four():
    rep = obstruction_residual(random_jet_metric(4, 6, seed=5))
    assert rep.bach_deviation < 1e-9
    assert rep.trace_defect < 1e-10
    with pytest.raises(CapabilityError):
        obstruction_residual(random_jet_metric(5, 6, seed=5))


def test_insufficient_order_is_reported():
    with pytest.raises(InsufficientOrderError):
        solve_expansion(random_jet_metric(5, 3, seed=0), 3, top_order=0)


def test_batched_points_match_single_points():
    spec = torus_spec(3, seed=4)
    pts = np.array([[0.1, 0.2, 0.3], [1.5, -0.7, 2.0]])
    batched = solve_expansion(instantiate_jets(spec, pts, 4), 2, top_order=0)
    for b, p in enumerate(pts):
        single = solve_expansion(instantiate_jets(spec, p, 4), 2, top_order=0)
        assert rel(batched.value(2)[b], single.value(2)) < 1e-12
