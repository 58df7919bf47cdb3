"""Registry of named identity checks grouped into suites.

Each entry builds its standard instance from the run seed, evaluates both
sides of an identity and returns a :class:`VariationReport`.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable

import numpy as np

from . import ambient_curvature as ac
from . import conformal_lab as lab
from .chart_geometry import MetricJet, covariant_derivative, geometry
from .errors import UsageError
from .fg_expansion import closed_form_series, obstruction_residual, series_residuals, solve_expansion
from .jets import Jet, einsum
from .metric_zoo import builtin_metric, flat_spec, random_conformal_factor, random_jet_metric, torus_spec
from .volume_coeffs import (
    building_block_forms,
    linearization_coefficients,
    schouten_endomorphism,
    sigma_and_newton,
    volume_coefficients,
    volume_coefficients_direct,
)

SUITES = ("conventions", "curvature", "fg", "conformal_curvature", "volume", "transformation", "variation", "torus")
RANDOM_AMPLITUDE = 0.05


@dataclass
class RunContext:
    seed: int = 0
    grid: int = 16
    jobs: int = 1
    tolerances: dict[str, float] = field(default_factory=dict)

    def tol(self, name: str, default: float) -> float:
        if name in self.tolerances:
            return self.tolerances[name]
        return self.tolerances.get("*", default)


@dataclass(frozen=True)
class Check:
    name: str
    suite: str
    tol: float
    run: Callable[[RunContext, float], lab.VariationReport]
    orders: str = ""


REGISTRY: list[Check] = []


def check(suite: str, name: str, tol: float, orders: str = ""):
    def deco(fn):
        REGISTRY.append(Check(f"{suite}.{name}", suite, tol, fn, orders))
        return fn

    return deco


# ----- cached instances ------------------------------------------------------------------


@lru_cache(maxsize=None)
def rmetric(n: int, order: int, seed: int) -> MetricJet:
    return random_jet_metric(n, order, seed, RANDOM_AMPLITUDE)


@lru_cache(maxsize=None)
def romega(n: int, order: int, seed: int) -> Jet:
    return random_conformal_factor(n, order, seed + 7919, 0.1, degree=4)


@lru_cache(maxsize=None)
def ccset(n: int, k_max: int, seed: int):
    return ac.conformal_curvature_set(rmetric(n, 2 * k_max + 2, seed), k_max)


@lru_cache(maxsize=None)
def lcf_metric(n: int, order: int, seed: int) -> MetricJet:
    return builtin_metric("conf_flat", {"seed": seed}, [0.1] * n, order, n)


@lru_cache(maxsize=None)
def sphere_metric(n: int, order: int) -> MetricJet:
    return builtin_metric("sphere", {}, [0.0] * n, order, n)


def defect(name: str, value: float, tol: float, **details) -> lab.VariationReport:
    """A report for a quantity that must vanish; ``value`` is already relative."""
    return lab.VariationReport(name, value, 0.0, value, value, tol, details=dict(details))


def _max_report(name: str, reports: Iterable[lab.VariationReport], tol: float) -> lab.VariationReport:
    reports = list(reports)
    worst = max(reports, key=lambda r: r.rel_err)
    return lab.VariationReport(name, worst.lhs, worst.rhs, worst.abs_err, worst.rel_err, tol,
                               details={r.name: r.rel_err for r in reports})


# ----- conventions ----------------------------------------------------------------------------


@check("conventions", "g1_equals_2P", 1e-10, "n=5, order 6")
def _(ctx, tol):
    g = rmetric(5, 6, ctx.seed)
    s = solve_expansion(g, 1)
    return lab.compare("conventions.g1_equals_2P", s.coefficient(1), geometry(g, False).P * 2.0, tol)


@check("conventions", "sphere_einstein", 1e-10, "n=4 sphere, order 4")
def _(ctx, tol):
    g = builtin_metric("sphere", {}, [0.3, -0.2, 0.1, 0.4], 4, 4)
    ric = geometry(g, False).curvature.ricci.jet
    return lab.compare("conventions.sphere_einstein", ric, g.components * 3.0, tol)


@check("conventions", "sphere_curvature_sign", 1e-10, "n=3 sphere, order 4")
def _(ctx, tol):
    g = builtin_metric("sphere", {}, [0.2, 0.5, -0.3], 4, 3)
    rm = geometry(g, False).curvature.riemann.jet
    gg = g.components
    rhs = einsum("...ik,...jl->...ijkl", gg, gg) - einsum("...il,...jk->...ijkl", gg, gg)
    return lab.compare("conventions.sphere_curvature_sign", rm, rhs, tol)


@check("conventions", "bach_divergence", 1e-9, "n=5, order 6")
def _(ctx, tol):
    g = rmetric(5, 6, ctx.seed)
    geo = geometry(g)
    gi = geo.ginv
    dB = geo.nabla(geo.B, "dd")
    lhs = einsum("...jk,...ijk->...i", gi, dB)
    Pup = einsum("...ja,...kb,...ab->...jk", gi, gi, geo.P)
    rhs = einsum("...jk,...jki->...i", Pup, geo.C) * (g.n - 4.0)
    return lab.compare("conventions.bach_divergence", lhs, rhs, tol)


# ----- curvature -------------------------------------------------------------------------------


def _r0(ctx):
    cs = ccset(5, 1, ctx.seed)
    return cs, geometry(cs.metric)


@check("curvature", "r0_weyl", 1e-9, "n=5")
def _(ctx, tol):
    cs, geo = _r0(ctx)
    return lab.compare("curvature.r0_weyl", cs.table(0).block("ijkl").value, geo.W.value, tol)


@check("curvature", "r0_cotton", 1e-9, "n=5")
def _(ctx, tol):
    cs, geo = _r0(ctx)
    return lab.compare("curvature.r0_cotton", cs.table(0).block("∞jkl").value, geo.C.value, tol)


@check("curvature", "r0_bach", 1e-9, "n=5")
def _(ctx, tol):
    cs, geo = _r0(ctx)
    return lab.compare("curvature.r0_bach", cs.table(0).block("∞ij∞").value, geo.B.value / (4 - 5), tol)


@check("curvature", "symmetries", 1e-10, "n=5, r<=1")
def _(ctx, tol):
    cs = ccset(5, 2, ctx.seed)
    d = {f"r{r}.{k}": v for r in range(2) for k, v in ac.symmetry_defects(cs.table(r)).items()}
    return defect("curvature.symmetries", max(d.values()), tol, **d)


@check("curvature", "zero_index", 1e-10, "n=5, r<=1")
def _(ctx, tol):
    cs = ccset(5, 2, ctx.seed)
    return defect("curvature.zero_index", ac.zero_index_defect([cs.table(0), cs.table(1)]), tol)


# ----- fg ----------------------------------------------------------------------------------------


@check("fg", "g2_formula", 1e-8, "n=5, order 6")
def _(ctx, tol):
    g = rmetric(5, 6, ctx.seed)
    s = solve_expansion(g, 2)
    geo = geometry(g)
    PP = einsum("...ik,...kl,...lj->...ij", geo.P, geo.ginv, geo.P)
    return lab.compare("fg.g2_formula", s.coefficient(2), geo.B * (2.0 / (4 - 5)) + PP * 2.0, tol)


@check("fg", "einstein_residuals", 1e-10, "n=5, order 8, K=3")
def _(ctx, tol):
    g = rmetric(5, 8, ctx.seed)
    s = solve_expansion(g, 3)
    res = series_residuals(s, 1) + series_residuals(s, 1, "rr")
    scale = max(float(np.abs(s.coefficient(k).coeffs).max()) for k in range(1, 4))
    return defect("fg.einstein_residuals", max(res) / scale, tol, residuals=res)


@check("fg", "einstein_residuals_n3", 1e-10, "n=3, order 10, K=4 (trace of g^(3) from the rho-rho equation)")
def _(ctx, tol):
    s = solve_expansion(rmetric(3, 10, ctx.seed), 4)
    res = series_residuals(s, 1) + series_residuals(s, 1, "rr")
    scale = max(float(np.abs(s.coefficient(k).coeffs).max()) for k in range(1, 5))
    return defect("fg.einstein_residuals_n3", max(res) / scale, tol, residuals=res)


@check("fg", "lcf_closed_form_n3", 1e-9, "n=3 conformally flat, K=4")
def _(ctx, tol):
    return _closed_form_report("fg.lcf_closed_form_n3", lcf_metric(3, 10, ctx.seed), tol, 4)


def _closed_form_report(name: str, g: MetricJet, tol: float, K: int = 3) -> lab.VariationReport:
    s, c = solve_expansion(g, K), closed_form_series(g, K)
    # g^(k) vanishes for k >= 3, so errors are measured against |g^(1)|
    scale = float(np.abs(c.coefficient(1).coeffs).max())
    return _max_report(name, (lab.compare(f"k{k}", s.coefficient(k), c.coefficient(k), tol, scale=scale)
                              for k in range(1, K + 1)), tol)


@check("fg", "sphere_closed_form", 1e-10, "n=5 sphere, K=3")
def _(ctx, tol):
    g = sphere_metric(5, 8)
    return _closed_form_report("fg.sphere_closed_form", g, tol)


@check("fg", "lcf_closed_form", 1e-9, "n=5 conformally flat, K=3")
def _(ctx, tol):
    g = lcf_metric(5, 8, ctx.seed)
    return _closed_form_report("fg.lcf_closed_form", g, tol)


@check("fg", "obstruction_trace_n4", 1e-9, "n=4, order 6")
def _(ctx, tol):
    g = rmetric(4, 6, ctx.seed)
    s = solve_expansion(g, 2)
    geo = geometry(g)
    pp = einsum("...ia,...jb,...ab,...ij->...", geo.ginv, geo.ginv, geo.P, geo.P) * 2.0
    return lab.compare("fg.obstruction_trace_n4", s.even_trace, pp, tol)


@check("fg", "obstruction_bach_n4", 1e-8, "n=4, order 6")
def _(ctx, tol):
    rep = obstruction_residual(rmetric(4, 6, ctx.seed))
    return defect("fg.obstruction_bach_n4", float(rep.bach_deviation), tol,
                  proportionality=rep.bach_proportionality, trace_defect=rep.trace_defect)


# ----- conformal curvature --------------------------------------------------------------------------


@check("conformal_curvature", "omega_tracefree", 1e-10, "n=7, k<=3")
def _(ctx, tol):
    cs = ccset(7, 3, ctx.seed)
    gi = cs.metric.inverse().value
    vals = {}
    for k in range(1, 4):
        om = np.asarray(cs.Omega(k).value)
        vals[f"k{k}"] = abs(float(np.einsum("ij,ij", gi, om))) / float(np.abs(om).max())
    return defect("conformal_curvature.omega_tracefree", max(vals.values()), tol, **vals)


@check("conformal_curvature", "cotton_tracefree", 1e-10, "n=7, k<=3")
def _(ctx, tol):
    cs = ccset(7, 3, ctx.seed)
    gi = cs.metric.inverse().value
    vals = {}
    for k in range(1, 4):
        c = np.asarray(cs.C(k).value)
        vals[f"k{k}"] = max(float(np.abs(np.einsum("ij,ijl->l", gi, c)).max()),
                            float(np.abs(np.einsum("jl,ijl->i", gi, c)).max())) / float(np.abs(c).max())
    return defect("conformal_curvature.cotton_tracefree", max(vals.values()), tol, **vals)


@check("conformal_curvature", "cotton1_symmetrized", 1e-10, "n=5")
def _(ctx, tol):
    cs = ccset(5, 1, ctx.seed)
    C = geometry(cs.metric).C.value
    return lab.compare("conformal_curvature.cotton1_symmetrized", cs.C(1).value, C + C.transpose(1, 0, 2), tol)


@check("conformal_curvature", "cotton2_rearranged", 1e-10, "n=5")
def _(ctx, tol):
    cs = ccset(5, 2, ctx.seed)
    d = cs.table(1).block("∞ij∞l").value
    rhs = 3 * d - np.einsum("lij->ijl", d) - np.einsum("lji->ijl", d)
    return lab.compare("conformal_curvature.cotton2_rearranged", cs.C(2).value, rhs, tol)


@check("conformal_curvature", "omega2_closed_form", 1e-8, "n=7, order 6")
def _(ctx, tol):
    cs = ccset(7, 2, ctx.seed)
    return lab.compare("conformal_curvature.omega2_closed_form", cs.Omega(2).value,
                       ac.omega2_from_curvature(cs.metric).value, tol)


@check("conformal_curvature", "lcf_vanishing", 1e-9, "n=5 conformally flat, k<=2")
def _(ctx, tol):
    g = lcf_metric(5, 6, ctx.seed)
    cs = ac.conformal_curvature_set(g, 2)
    scale = float(np.abs(geometry(g, False).P.value).max())
    val = max(float(np.abs(cs.table(r).values).max()) for r in range(2)) / scale
    return defect("conformal_curvature.lcf_vanishing", val, tol)


# ----- volume ---------------------------------------------------------------------------------------


@check("volume", "sphere_binomial", 1e-10, "n=5 sphere, k<=3")
def _(ctx, tol):
    vol = volume_coefficients(solve_expansion(sphere_metric(5, 8), 3), 3)
    expect = [math.comb(5, k) * 2.0 ** -k for k in range(1, 4)]
    return lab.compare("volume.sphere_binomial", vol.values(), expect, tol)


@check("volume", "lcf_sigma", 1e-8, "n=3 conformally flat, k<=3")
def _(ctx, tol):
    g = lcf_metric(3, 8, ctx.seed)
    vol = volume_coefficients(solve_expansion(g, 3), 3)
    geo = geometry(g, False)
    sv = sigma_and_newton(schouten_endomorphism(geo.P, geo.ginv))
    sig = [float(sv.sigma[k].value) if k < len(sv.sigma) else 0.0 for k in range(1, 4)]
    return lab.compare("volume.lcf_sigma", vol.values(), sig, tol)


@check("volume", "v3_formula", 1e-8, "n=5, order 8")
def _(ctx, tol):
    g = rmetric(5, 8, ctx.seed)
    vol = volume_coefficients(solve_expansion(g, 3), 3)
    geo = geometry(g)
    sv = sigma_and_newton(schouten_endomorphism(geo.P, geo.ginv))
    pb = einsum("...ia,...jb,...ab,...ij->...", geo.ginv, geo.ginv, geo.P, geo.B)
    rhs = sv.sigma[3] + pb * (1.0 / (3 * (5 - 4)))
    return lab.compare("volume.v3_formula", vol.v[3], rhs, tol)


@check("volume", "direct_determinant", 1e-10, "n=5, order 8")
def _(ctx, tol):
    s = solve_expansion(rmetric(5, 8, ctx.seed), 3)
    return lab.compare("volume.direct_determinant", volume_coefficients(s, 3).values(), volume_coefficients_direct(s, 3), tol)


@check("volume", "building_blocks", 1e-8, "n=7, k<=3")
def _(ctx, tol):
    cs = ccset(7, 3, ctx.seed)
    g = cs.metric
    geo = geometry(g, False)
    s = cs.series
    vol = volume_coefficients(s, 4)
    om = [cs.Omega(k) for k in (1, 2, 3)]
    P, gi = geo.P.truncate(0), geo.ginv.truncate(0)
    reps = []
    for k in range(1, 5):
        bb = building_block_forms(P, om, gi, k)
        reps.append(lab.compare(f"G{k}", bb.G.value, s.coefficient(k).value, tol))
        reps.append(lab.compare(f"V{k}", float(bb.V.value), float(vol.v[k].value), tol))
    return _max_report("volume.building_blocks", reps, tol)


@check("volume", "linearization_table", 1e-9, "n=5, k<=3")
def _(ctx, tol):
    cs = ccset(5, 2, ctx.seed)
    g = cs.metric
    geo = geometry(g, False)
    vol = volume_coefficients(cs.series, 3)
    sv = sigma_and_newton(schouten_endomorphism(geo.P, geo.ginv))
    gi = geo.ginv.value
    om1 = np.asarray(cs.Omega(1).value)
    reps = [
        lab.compare("L1", linearization_coefficients(vol, 1).value, -gi, tol),
        lab.compare("L2", linearization_coefficients(vol, 2).value, -sv.T_up(geo.ginv, 1).value, tol),
        lab.compare("L3", linearization_coefficients(vol, 3).value,
                    -sv.T_up(geo.ginv, 2).value + gi @ om1 @ gi / 3.0, tol),
    ]
    return _max_report("volume.linearization_table", reps, tol)


@check("volume", "linearization_lcf", 1e-8, "n=3 conformally flat, k<=3")
def _(ctx, tol):
    g = lcf_metric(3, 8, ctx.seed)
    vol = volume_coefficients(solve_expansion(g, 3), 3)
    geo = geometry(g, False)
    sv = sigma_and_newton(schouten_endomorphism(geo.P, geo.ginv))
    reps = [lab.compare(f"L{k}", linearization_coefficients(vol, k), -sv.T_up(geo.ginv, k - 1), tol) for k in range(1, 4)]
    return _max_report("volume.linearization_lcf", reps, tol)


# ----- transformation --------------------------------------------------------------------------------


@check("transformation", "schouten", 1e-10, "n=5")
def _(ctx, tol):
    return lab.transformation_law_check(rmetric(5, 6, ctx.seed), romega(5, 6, ctx.seed), "schouten", tol=tol)


@check("transformation", "bach", 1e-9, "n=5")
def _(ctx, tol):
    return lab.transformation_law_check(rmetric(5, 6, ctx.seed), romega(5, 6, ctx.seed), "bach", tol=tol)


@check("transformation", "omega_full_k1", 1e-8, "n=5")
def _(ctx, tol):
    return lab.transformation_law_check(rmetric(5, 6, ctx.seed), romega(5, 6, ctx.seed), "omega_full", 1, tol)


@check("transformation", "omega_full_k2", 1e-8, "n=5")
def _(ctx, tol):
    return lab.transformation_law_check(rmetric(5, 6, ctx.seed), romega(5, 6, ctx.seed), "omega_full", 2, tol)


for _k in (1, 2, 3):
    def _lin(ctx, tol, k=_k):
        return lab.transformation_law_check(rmetric(5, 8, ctx.seed), romega(5, 8, ctx.seed), "omega_linear", k, tol)

    REGISTRY.append(Check(f"transformation.omega_linear_k{_k}", "transformation", 1e-8, _lin, "n=5"))


# ----- variation -----------------------------------------------------------------------------------


@check("variation", "expansion", 1e-8, "n=5, K=3")
def _(ctx, tol):
    return lab.variation_of_expansion(rmetric(5, 8, ctx.seed), romega(5, 8, ctx.seed), 3, tol)


@check("variation", "y_flat", 1e-9, "n=5 conformally flat")
def _(ctx, tol):
    return lab.flat_vector_field_check(lcf_metric(5, 8, ctx.seed), romega(5, 8, ctx.seed), 3, tol)


@check("variation", "expansion_lcf", 1e-8, "n=5 conformally flat, K=3")
def _(ctx, tol):
    return lab.variation_of_expansion(lcf_metric(5, 8, ctx.seed), romega(5, 8, ctx.seed), 3, tol)


for _k in (1, 2, 3):
    def _dvk(ctx, tol, k=_k):
        return lab.variation_of_volume_coefficients(rmetric(5, 8, ctx.seed), romega(5, 8, ctx.seed), k, tol)

    REGISTRY.append(Check(f"variation.dvk_k{_k}", "variation", 1e-8, _dvk, "n=5"))


@check("variation", "delta_sigma_lcf", 1e-8, "n=5 conformally flat, k=2")
def _(ctx, tol):
    return lab.lcf_variation_check(lcf_metric(5, 6, ctx.seed), romega(5, 6, ctx.seed), 2, tol)


@check("variation", "newton_divergence_lcf", 1e-8, "n=5 conformally flat, k<=3")
def _(ctx, tol):
    g = lcf_metric(5, 6, ctx.seed)
    geo = geometry(g, False)
    sv = sigma_and_newton(schouten_endomorphism(geo.P, geo.ginv))
    vals = {}
    for k in (2, 3):
        T = sv.T_up(geo.ginv, k - 1)
        dT = covariant_derivative(T, geo.conn, ("u", "u")).jet
        div = einsum("...iji->...j", dT)
        vals[f"k{k}"] = float(np.abs(div.coeffs).max()) / float(np.abs(dT.coeffs).max())
    return defect("variation.newton_divergence_lcf", max(vals.values()), tol, **vals)


@check("variation", "finite_difference", 1e-6, "n=5, k=2")
def _(ctx, tol):
    g, w = rmetric(5, 6, ctx.seed), romega(5, 6, ctx.seed)
    h = 1e-4
    jet = lab.variation_of_volume_coefficients(g, w, 2).lhs
    vp = float(volume_coefficients(solve_expansion(lab.conformal_rescale(g, w * h), 2), 2).v[2].value)
    vm = float(volume_coefficients(solve_expansion(lab.conformal_rescale(g, w * -h), 2), 2).v[2].value)
    return lab.compare("variation.finite_difference", float(jet.value), (vp - vm) / (2 * h), tol)


@check("variation", "second_jet_n5_k2", 1e-11, "n=5, 5 trials")
def _(ctx, tol):
    return lab.second_jet_dependence_check(rmetric(5, 6, ctx.seed), romega(5, 6, ctx.seed), 2, 5, ctx.seed, tol=tol)


@check("variation", "second_jet_n7_k3", 1e-11, "n=7, 5 trials")
def _(ctx, tol):
    return lab.second_jet_dependence_check(rmetric(7, 6, ctx.seed), romega(7, 6, ctx.seed), 3, 5, ctx.seed, tol=tol)


@check("variation", "second_jet_control", 1e-3, "n=5, 2-jet randomized")
def _(ctx, tol):
    return lab.second_jet_dependence_check(rmetric(5, 6, ctx.seed), romega(5, 6, ctx.seed), 2, 5, ctx.seed,
                                           control=True, tol=tol)


# ----- torus -------------------------------------------------------------------------------------------

TORUS_OMEGA = {
    3: "0.3*sin(x1)*cos(x2) + 0.2*cos(x3 + 0.5)",
    4: "0.3*sin(x1)*cos(x2) + 0.2*cos(x3 + 0.5) + 0.1*sin(x4)",
}


def _torus_tol(ctx, tol: float) -> float:
    # coarse grids resolve the integrals less sharply
    return tol if ctx.grid >= 16 else max(tol, 1e-5)


@check("torus", "flat", 1e-10, "n=3 flat torus, k=1")
def _(ctx, tol):
    spec = lab.TorusSpec(flat_spec(3), TORUS_OMEGA[3], min(ctx.grid, 8))
    return lab.functional_gradient_check(spec, 1, ctx.jobs, tol)


for _k in (1, 2):
    def _t3(ctx, tol, k=_k):
        spec = lab.TorusSpec(torus_spec(3, ctx.seed, RANDOM_AMPLITUDE), TORUS_OMEGA[3], ctx.grid)
        return lab.functional_gradient_check(spec, k, ctx.jobs, _torus_tol(ctx, tol))

    REGISTRY.append(Check(f"torus.gradient_n3_k{_k}", "torus", 1e-6, _t3, "perturbed 3-torus"))


@check("torus", "invariance_n4_k2", 1e-6, "perturbed 4-torus, k=n/2")
def _(ctx, tol):
    spec = lab.TorusSpec(torus_spec(4, ctx.seed, RANDOM_AMPLITUDE), TORUS_OMEGA[4], min(ctx.grid, 8))
    return lab.functional_gradient_check(spec, 2, ctx.jobs, tol)


# ----- running --------------------------------------------------------------------------------------


def select(suites: Iterable[str]) -> list[Check]:
    names = list(suites)
    if not names or "all" in names:
        return list(REGISTRY)
    unknown = [s for s in names if s not in SUITES]
    if unknown:
        raise UsageError(f"unknown suite {unknown[0]!r}; known: {', '.join(SUITES)}, all")
    return [c for c in REGISTRY if c.suite in names]


def run_checks(checks: Iterable[Check], ctx: RunContext) -> list[tuple[Check, lab.VariationReport, float]]:
    out = []
    for c in checks:
        t0 = time.perf_counter()
        rep = c.run(ctx, ctx.tol(c.name, c.tol))
        rep.name = c.name
        out.append((c, rep, time.perf_counter() - t0))
    return out
