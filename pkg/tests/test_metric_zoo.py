import json
import math

import numpy as np
import pytest

from ambientlab.conformal_lab import TorusSpec
from ambientlab.errors import ExpressionSyntaxError, InputError, UnknownIdentifierError
from ambientlab.metric_zoo import (
    builtin_metric,
    evaluate,
    instantiate_jets,
    parse_expression,
    parse_metric_spec,
    random_jet_metric,
    sphere_spec,
    to_source,
    torus_spec,
)


def test_parses_rational_expression():
    ast = parse_expression("1/(1+x1^2)", ["x1", "x2"])
    assert evaluate(ast, {"x1": 2.0, "x2": 0.0}) == pytest.approx(0.2)
    assert evaluate(parse_expression(to_source(ast), ["x1", "x2"]), {"x1": 2.0, "x2": 0.0}) == pytest.approx(0.2)


def test_precedence_and_unary_minus():
    env = {"x": 3.0}
    assert evaluate(parse_expression("-x^2", ["x"]), env) == pytest.approx(-9.0)
    assert evaluate(parse_expression("2*x^2 - x/3 + pi", ["x"]), env) == pytest.approx(18 - 1 + math.pi)
    assert evaluate(parse_expression("x^-2", ["x"]), env) == pytest.approx(1 / 9)
    assert evaluate(parse_expression("exp(log(x)) + sqrt(x*x) + sin(0)*cos(0)", ["x"]), env) == pytest.approx(6.0)


def test_unclosed_parenthesis_reports_column():
    with pytest.raises(ExpressionSyntaxError) as err:
        parse_expression("sin(x1", ["x1"])
    assert err.value.column == 7


def test_unknown_identifier():
    with pytest.raises(UnknownIdentifierError) as err:
        parse_expression("phi*x1", ["x1"])
    assert err.value.name == "phi"


@pytest.mark.parametrize("bad", ["x1 +", "(x1", "x1 ** 2", "3 x1", "", "sin x1"])
def test_malformed_expressions_raise_syntax_errors(bad):
    with pytest.raises(ExpressionSyntaxError):
        parse_expression(bad, ["x1"])


def test_spec_document_round_trip():
    spec = sphere_spec(3)
    text = json.dumps(spec.to_document())
    again = parse_metric_spec(text)
    assert again.to_document() == spec.to_document()
    assert parse_metric_spec(again.to_document()) == spec


def test_spec_errors_name_the_component():
    doc = {"dimension": 2, "variables": ["x", "y"], "components": [["1"], ["0", "1+(y"]]}
    with pytest.raises(ExpressionSyntaxError, match=r"component \[1\]\[1\]"):
        parse_metric_spec(doc)
    with pytest.raises(InputError):
        parse_metric_spec({"dimension": 2, "variables": ["x"], "components": [["1"], ["0", "1"]]})
    with pytest.raises(InputError):
        parse_metric_spec("{not json")


def test_jet_derivatives_match_finite_differences():
    spec = parse_metric_spec({"dimension": 2, "variables": ["x", "y"],
                              "components": [["exp(x*y)"], ["sin(x)/5", "1 + x^2*y"]]})
    pt = np.array([0.3, -0.4])
    g = instantiate_jets(spec, pt, 2)
    h = 1e-5

    def G(p):
        return spec.evaluate_grid([np.array(p[0]), np.array(p[1])])

    for v in range(2):
        e = np.eye(2)[v]
        fd = (G(pt + h * e) - G(pt - h * e)) / (2 * h)
        exp = [0, 0]
        exp[v] = 1
        assert np.allclose(g.components.coefficient(tuple(exp)), fd, atol=1e-9)
    assert np.allclose(g.components.value, G(pt), atol=1e-15)


def test_random_jet_family_is_deterministic():
    a = random_jet_metric(4, 3, seed=7)
    b = random_jet_metric(4, 3, seed=7)
    c = random_jet_metric(4, 3, seed=8)
    assert np.array_equal(a.components.coeffs, b.components.coeffs)
    assert not np.array_equal(a.components.coeffs, c.components.coeffs)
    assert np.linalg.eigvalsh(a.components.value).min() > 0.5
    assert np.abs(a.components.value - np.eye(4)).max() < 0.1


def test_builtin_sphere_at_origin():
    g = builtin_metric("sphere", {}, [0.0] * 3, 2, 3)
    assert np.allclose(g.components.value, 4 * np.eye(3))


def test_torus_metric_is_periodic_and_bad_factor_is_rejected():
    spec = torus_spec(3, seed=1)
    x = np.random.default_rng(0).uniform(0, 2 * np.pi, size=(5, 3))
    a = spec.evaluate_grid(list(x.T))
    b = spec.evaluate_grid(list((x + 2 * np.pi).T))
    assert np.allclose(a, b, atol=1e-12)
    TorusSpec(spec, "cos(x1) + sin(x2 - x3)", 4)
    with pytest.raises(InputError, match="periodic"):
        TorusSpec(spec, "x1/10", 4)
