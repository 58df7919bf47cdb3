"""Conformal transformation and variation identities, checked numerically.

Infinitesimal variations use an extra jet variable ``t`` of weight 0 capped
at degree 1: the metric ``e^{2 t omega} g`` is pushed through the whole
pipeline and the ``t``-linear coefficient of the result is the exact
first variation.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .ambient_curvature import conformal_curvature_set, transport_block
from .chart_geometry import ConnectionJet, MetricJet, christoffel, covariant_derivative, geometry, gradient
from .errors import CapabilityError, InputError, UsageError
from .fg_expansion import solve_expansion
from .jets import Jet, JetSpace, einsum, remap
from .metric_zoo import MetricSpec, instantiate_jets, instantiate_scalar, parse_expression, evaluate
from .volume_coeffs import (
    linearization_coefficients,
    rho_family,
    schouten_endomorphism,
    sigma_and_newton,
    volume_coefficients,
)

REL_FLOOR = 1e-30


# ----- reports -------------------------------------------------------------------------


@dataclass
class VariationReport:
    """Outcome of one identity check.

    ``rel_err = abs_err / max(|lhs|, |rhs|, scale, REL_FLOOR)`` with max norms;
    ``scale`` defaults to 0 and is set for integrals whose sides may both vanish.
    With ``expect="differ"`` the check passes when ``rel_err`` exceeds ``tol``
    (used by control experiments that must detect a change).
    """

    name: str
    lhs: Any
    rhs: Any
    abs_err: float
    rel_err: float
    tol: float
    tol_name: str = "rel"
    Y: Jet | None = None
    expect: str = "agree"
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        if not np.isfinite(self.rel_err):
            return False
        if self.expect == "differ":
            return self.rel_err > self.tol
        return self.rel_err <= self.tol

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "abs_err": float(self.abs_err),
            "rel_err": float(self.rel_err),
            "tol": float(self.tol),
            "tol_name": self.tol_name,
            "expect": self.expect,
            "passed": bool(self.passed),
        }
        if self.details:
            out["details"] = {k: _plain(v) for k, v in self.details.items()}
        return out


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _arrays(lhs, rhs) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(lhs, Jet) and isinstance(rhs, Jet):
        space = lhs.space.intersect(rhs.space)
        return lhs.to_space(space).coeffs, rhs.to_space(space).coeffs
    return np.asarray(lhs, dtype=np.float64), np.asarray(rhs, dtype=np.float64)


def compare(name: str, lhs, rhs, tol: float, tol_name: str = "rel", scale: float = 0.0, **details) -> VariationReport:
    a, b = _arrays(lhs, rhs)
    abs_err = float(np.max(np.abs(a - b))) if a.size else 0.0
    denom = max(float(np.max(np.abs(a))) if a.size else 0.0, float(np.max(np.abs(b))) if b.size else 0.0, scale, REL_FLOOR)
    return VariationReport(name, lhs, rhs, abs_err, abs_err / denom, tol, tol_name, details=dict(details))


def _value(j) -> np.ndarray:
    return np.asarray(j.value if isinstance(j, Jet) else j, dtype=np.float64)


# ----- conformal factors and the parameter variable ---------------------------------------------


@dataclass
class ConformalFactor:
    omega: Jet
    source: str | None = None
    variables: tuple[str, ...] | None = None

    @classmethod
    def from_expression(cls, src: str, variables: Sequence[str], point, order: int,
                        space: JetSpace | None = None) -> "ConformalFactor":
        return cls(instantiate_scalar(src, variables, point, order, space), src, tuple(variables))

    def grid_values(self, coords: Sequence[np.ndarray]) -> np.ndarray:
        if self.source is None:
            raise UsageError("conformal factor has no expression source")
        ast = parse_expression(self.source, list(self.variables))
        return np.asarray(evaluate(ast, dict(zip(self.variables, coords))), dtype=np.float64)


def _omega_jet(omega: ConformalFactor | Jet) -> Jet:
    return omega.omega if isinstance(omega, ConformalFactor) else omega


def conformal_rescale(g: MetricJet, omega: ConformalFactor | Jet) -> MetricJet:
    """``e^{2 omega} g`` coefficient-exactly."""
    w = _omega_jet(omega)
    if w.n_vars != g.components.n_vars:
        raise InputError(f"conformal factor has {w.n_vars} jet variables, metric chart has {g.components.n_vars}")
    space = g.space.intersect(w.space)
    scale = (w.to_space(space) * 2.0).exp()
    return MetricJet(einsum("...,...ij->...ij", scale, g.components.to_space(space)), g.n)


def with_parameter(space: JetSpace) -> tuple[JetSpace, int]:
    """``space`` extended by one weight-0 variable capped at degree 1."""
    nv = space.n_vars + 1
    out = JetSpace.get(nv, space.order, list(space.weights) + [0], list(space.caps) + [((nv - 1,), 1)])
    return out, nv - 1


def lift(a: Jet, space: JetSpace) -> Jet:
    return remap(a, space, {v: v for v in range(a.n_vars)})


def split_parameter(a: Jet, t_var: int) -> tuple[Jet, Jet]:
    """``(a|_{t=0}, d a/dt)`` as jets without the parameter variable."""
    s = a.space
    caps = [(grp, b) for grp, b in s.caps if t_var not in grp]
    keep = [v for v in range(s.n_vars) if v != t_var]
    target = JetSpace.get(len(keep), s.order, [s.weights[v] for v in keep], [(tuple(keep.index(v) for v in grp), b) for grp, b in caps])
    vmap = {v: i for i, v in enumerate(keep)}
    return remap(a, target, vmap, {t_var: 0}), remap(a, target, vmap, {t_var: 1})


def varied_metric(g: MetricJet, omega: Jet) -> tuple[MetricJet, int]:
    """``e^{2 t omega} g`` in the parameter-extended space."""
    space, t = with_parameter(g.space.intersect(omega.space))
    tj = Jet.variable(space, t)
    factor = (lift(omega, space) * tj * 2.0).exp()
    return MetricJet(einsum("...,...ij->...ij", factor, lift(g.components, space)), g.n), t


def _dw(omega: Jet, n: int) -> Jet:
    return gradient(omega, tuple(range(n)))


def _hessian(g: MetricJet, omega: Jet) -> Jet:
    ginv = g.inverse()
    gam = christoffel(g.components, ginv, g.coords)
    dw = _dw(omega, g.n)
    return covariant_derivative(dw, ConnectionJet(gam, g.coords), ("d",)).jet


def _divergence(g: MetricJet, X: Jet) -> Jet:
    """``nabla_i X^i`` of a vector field."""
    ginv = g.inverse()
    gam = christoffel(g.components, ginv, g.coords)
    div = X[..., 0].partial(0)
    for i in range(1, g.n):
        div = div + X[..., i].partial(i)
    return div + einsum("...iik,...k->...", gam, X)


# ----- transformation laws ---------------------------------------------------------------------

LAWS = ("schouten", "bach", "omega_full", "omega_linear")


def transformation_law_check(g: MetricJet, omega: ConformalFactor | Jet, law: str, k: int = 1,
                             tol: float = 1e-8) -> VariationReport:
    """Compare a quantity of ``e^{2 omega} g`` with its transformation law on the ``g`` side."""
    w = _omega_jet(omega)
    n = g.n
    if law == "schouten":
        gh = conformal_rescale(g, w)
        lhs = geometry(gh, with_bach=False).P
        geo = geometry(g, with_bach=False)
        dw = _dw(w, n)
        norm = einsum("...ij,...i,...j->...", geo.ginv, dw, dw)
        rhs = geo.P - _hessian(g, w) + einsum("...i,...j->...ij", dw, dw) - einsum("...,...ij->...ij", norm * 0.5, g.components)
        return compare("transformation.schouten", lhs, rhs, tol)
    if law == "bach":
        if n == 4:
            raise CapabilityError("the first extended obstruction tensor needs n != 4")
        gh = conformal_rescale(g, w)
        gk = geometry(gh).B * (1.0 / (4 - n))
        lhs = einsum("...,...ij->...ij", (w * 2.0).exp(), gk)
        geo = geometry(g)
        dw = _dw(w, n)
        wup = einsum("...ij,...j->...i", geo.ginv, dw)
        Csym = (geo.C + geo.C.swapaxes(-3, -2)) * 0.5
        rhs = (geo.B * (1.0 / (4 - n)) - einsum("...k,...ijk->...ij", wup, Csym) * 2.0
               + einsum("...k,...l,...kijl->...ij", wup, wup, geo.W))
        return compare("transformation.bach", lhs, rhs, tol)
    if law == "omega_full":
        if not 1 <= k <= 2:
            raise CapabilityError("omega_full is checked for k <= 2")
        gh = conformal_rescale(g, w)
        hat = conformal_curvature_set(gh, k)
        lhs = math.exp(2 * k * float(w.value)) * _value(hat.Omega(k))
        cs = conformal_curvature_set(g, k)
        dw = _value(_dw(w, n))
        rhs = transport_block(cs.table(k - 1), dw, _value(g.inverse()), "∞ij∞" + "∞" * (k - 1))
        return compare(f"transformation.omega_full.k{k}", lhs, rhs, tol)
    if law == "omega_linear":
        if not 1 <= k <= 3:
            raise CapabilityError("omega_linear is checked for k <= 3")
        gt, t = varied_metric(g, w)
        hat = conformal_curvature_set(gt, k).Omega(k)
        wt = lift(w, gt.space).to_space(hat.space) * Jet.variable(hat.space, t)
        weighted = einsum("...,...ij->...ij", (wt * (2.0 * k)).exp(), hat)
        base, lhs = split_parameter(weighted, t)
        cs = conformal_curvature_set(g, k)
        Ck = cs.C(k)
        dw = _dw(w, n)
        wup = einsum("...ij,...j->...i", g.inverse(), dw)
        rhs = -einsum("...l,...ijl->...ij", wup, Ck)
        rep = compare(f"transformation.omega_linear.k{k}", lhs, rhs, tol)
        rep.details["unvaried_err"] = compare("", base, cs.Omega(k), tol).rel_err
        return rep
    raise UsageError(f"unknown transformation law {law!r}; known: {', '.join(LAWS)}")


# ----- variation of the expansion ---------------------------------------------------------------


def y_field(g: MetricJet, omega: Jet, K: int, series=None):
    """``Y_j(rho) = -g_jk(rho) int_0^rho g^{kl}(u) du omega_l`` and the ``rho`` family."""
    series = series or solve_expansion(g, K)
    fam = rho_family(series, K)
    n = g.n
    w = lift(omega, fam.space) if omega.n_vars < fam.space.n_vars else omega.to_space(fam.space)
    dw = _dw(w, n)
    int_ginv = fam.ginv.integrate(fam.rho_var)
    Yup = -einsum("...ij,...j->...i", int_ginv, dw)
    Y = einsum("...ij,...j->...i", fam.g, Yup)
    return Y, Yup, fam, w


def variation_of_expansion(g: MetricJet, omega: ConformalFactor | Jet, K: int, tol: float = 1e-8) -> VariationReport:
    """``delta g_rho = 2 omega (1 - rho d_rho) g_rho + 2 nabla_(i Y_j)`` per rho-order ``0..K``."""
    w = _omega_jet(omega)
    n = g.n
    gt, t = varied_metric(g, w)
    series_t = solve_expansion(gt, K)
    series = solve_expansion(g, K)
    Y, _, fam, wr = y_field(g, w, K, series)
    rv = fam.rho_var
    coords = tuple(range(n))
    gam = christoffel(fam.g, fam.ginv, coords)
    dY = gradient(Y, coords)  # [..., j, i] = d_i Y_j
    nablaY = einsum("...ji->...ij", dY) - einsum("...kij,...k->...ij", gam, Y)
    # rho d/drho scales the rho^a coefficient by a
    euler = fam.g.coeffs * fam.space.exponents[:, rv].reshape((-1,) + (1,) * fam.g.ndim)
    gdot = fam.g - Jet(fam.space, euler)
    rhs_rho = einsum("...,...ij->...ij", wr * 2.0, gdot) + nablaY + nablaY.swapaxes(-1, -2)
    lhs_all, rhs_all = [], []
    for k in range(K + 1):
        lhs_all.append(split_parameter(series_t.coefficient(k), t)[1])
        rhs_all.append(fam.coefficient(rhs_rho, k, rhs_rho.order - k) * float(math.factorial(k)))
    # one scale for every order: some orders vanish identically (conformally flat g)
    scale = max(float(np.abs(j.coeffs).max()) for j in lhs_all + rhs_all)
    per_order, worst = {}, None
    for k in range(K + 1):
        rep = compare(f"rho^{k}", lhs_all[k], rhs_all[k], tol, scale=scale)
        per_order[k] = rep.rel_err
        if worst is None or rep.rel_err > worst.rel_err:
            worst = rep
    out = VariationReport("variation.expansion", lhs_all, rhs_all, worst.abs_err, worst.rel_err, tol, Y=Y,
                          details={"per_rho_order": per_order})
    return out


def flat_vector_field_check(g: MetricJet, omega: ConformalFactor | Jet, K: int = 2, tol: float = 1e-9) -> VariationReport:
    """For locally conformally flat ``g``: ``Y_j = -rho (delta_j^k + rho P_j^k) omega_k``."""
    w = _omega_jet(omega)
    n = g.n
    Y, _, fam, wr = y_field(g, w, K)
    geo = geometry(g, with_bach=False)
    P = lift(geo.P, fam.space)
    ginv = lift(geo.ginv, fam.space)
    dw = _dw(wr, n)
    rho = Jet.variable(fam.space, fam.rho_var)
    Pmixed = einsum("...jl,...lk->...jk", P, ginv)
    inner = dw + einsum("...,...jk,...k->...j", rho, Pmixed, dw)
    rhs = -einsum("...,...j->...j", rho, inner)
    return compare("variation.y_flat", Y, rhs, tol)


# ----- variation of the volume coefficients ----------------------------------------------------


def _dvk_sides(g: MetricJet, w: Jet, k: int):
    gt, t = varied_metric(g, w)
    vol_t = volume_coefficients(solve_expansion(gt, k), k)
    _, lhs = split_parameter(vol_t.v[k], t)
    vol = volume_coefficients(solve_expansion(g, k), k)
    L = linearization_coefficients(vol, k)
    dw = _dw(w, g.n)
    X = einsum("...ij,...j->...i", L, dw)
    div = _divergence(g, X)
    vk = vol.v[k]
    return lhs, div, vk, vol, L


def linearization_operator(g: MetricJet, omega: ConformalFactor | Jet, k: int) -> Jet:
    """``P_k(omega) = nabla_i (L^{ij} nabla_j omega) - 2 k v_k omega``."""
    w = _omega_jet(omega)
    _, div, vk, _, _ = _dvk_sides(g, w, k)
    return div - vk * w * (2.0 * k)


def variation_of_volume_coefficients(g: MetricJet, omega: ConformalFactor | Jet, k: int, tol: float = 1e-8) -> VariationReport:
    """``delta v_k = -2 k omega v_k + nabla_i (L^{ij}_(k) nabla_j omega)``."""
    w = _omega_jet(omega)
    lhs, div, vk, _, _ = _dvk_sides(g, w, k)
    rhs = div - vk * w * (2.0 * k)
    return compare(f"variation.dvk.k{k}", lhs, rhs, tol)


def lcf_variation_check(g: MetricJet, omega: ConformalFactor | Jet, k: int, tol: float = 1e-8) -> VariationReport:
    """For locally conformally flat ``g``: ``delta sigma_k = -T^{ij}_(k-1) omega_ij - 2 k sigma_k omega``."""
    w = _omega_jet(omega)
    gt, t = varied_metric(g, w)
    vol_t = volume_coefficients(solve_expansion(gt, k), k)
    _, lhs = split_parameter(vol_t.v[k], t)
    geo = geometry(g, with_bach=False)
    sv = sigma_and_newton(schouten_endomorphism(geo.P, geo.ginv))
    Tup = sv.T_up(geo.ginv, k - 1)
    hess = _hessian(g, w)
    rhs = -einsum("...ij,...ij->...", Tup, hess) - sv.sigma[k] * w * (2.0 * k)
    return compare(f"variation.delta_sigma.k{k}", lhs, rhs, tol)


# ----- dependence on the 2-jet of omega ----------------------------------------------------------


def _randomized(w: Jet, rng: np.random.Generator, min_degree: int, amplitude: float) -> Jet:
    s = w.space
    deg = s.exponents.sum(axis=1)
    c = w.coeffs.copy()
    rows = deg >= min_degree
    fact = np.array([np.prod([math.factorial(int(e)) for e in row]) for row in s.exponents[rows]])
    c[rows] = amplitude * rng.uniform(-1.0, 1.0, size=int(rows.sum())) / fact
    return Jet(s, c)


def _jet_invariants(g: MetricJet, k: int) -> np.ndarray:
    series = solve_expansion(g, k, top_order=0)
    vol = volume_coefficients(series, k)
    vals = [float(vol.v[k].value)]
    n = g.n
    top = k if n % 2 else min(k, n // 2 - 1)
    for j in range(1, top + 1):
        vals.extend(np.asarray(series.coefficient(j).value).ravel())
    return np.array(vals)


def second_jet_dependence_check(g: MetricJet, omega: ConformalFactor | Jet, k: int, trials: int = 5,
                                seed: int = 0, control: bool = False, tol: float | None = None) -> VariationReport:
    """Randomize the jet of ``omega`` from degree 3 up (degree 2 up for ``control``) and measure the spread of
    ``v_k(e^{2 omega} g)`` and the ``rho``-derivatives of the rescaled expansion at the base point."""
    w = _omega_jet(omega)
    if g.order < 2 * k:
        raise CapabilityError(f"second-jet check for k={k} needs metric order >= {2 * k}")
    rng = np.random.default_rng(seed)
    min_degree = 2 if control else 3
    ref = _jet_invariants(conformal_rescale(g, w), k)
    worst, worst_vals = 0.0, ref
    scale = float(np.max(np.abs(ref)))
    for _ in range(trials):
        w2 = _randomized(w, rng, min_degree, 0.2)
        vals = _jet_invariants(conformal_rescale(g, w2), k)
        spread = float(np.max(np.abs(vals - ref))) / max(scale, REL_FLOOR)
        if spread >= worst:
            worst, worst_vals = spread, vals
    if tol is None:
        tol = 1e-3 if control else 1e-11
    name = f"variation.second_jet{'_control' if control else ''}.n{g.n}.k{k}"
    return VariationReport(name, ref, worst_vals, worst * max(scale, REL_FLOOR), worst, tol,
                           expect="differ" if control else "agree", details={"trials": trials})


# ----- torus integrals ------------------------------------------------------------------------------


@dataclass
class TorusSpec:
    """Periodic metric and conformal factor on the torus ``[0, 2 pi)^n`` with a uniform product grid."""

    metric: MetricSpec
    omega: str
    grid: int | tuple[int, ...] = 16

    def __post_init__(self):
        if isinstance(self.grid, int):
            self.grid = (self.grid,) * self.n
        if len(self.grid) != self.n:
            raise InputError(f"grid has {len(self.grid)} axes, torus has dimension {self.n}")
        parse_expression(self.omega, self.metric.variables)
        validate_periodicity(self)

    @property
    def n(self) -> int:
        return self.metric.dimension

    def nodes(self) -> np.ndarray:
        axes = [2 * np.pi * np.arange(m) / m for m in self.grid]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def cell_volume(self) -> float:
        return float(np.prod([2 * np.pi / m for m in self.grid]))


def validate_periodicity(spec: TorusSpec, samples: int = 16, tol: float = 1e-10) -> None:
    rng = np.random.default_rng(12345)
    n = spec.n
    x = rng.uniform(0, 2 * np.pi, size=(samples, n))
    ast = parse_expression(spec.omega, spec.metric.variables)
    for i in range(n):
        y = x.copy()
        y[:, i] += 2 * np.pi
        g0 = spec.metric.evaluate_grid([x[:, v] for v in range(n)])
        g1 = spec.metric.evaluate_grid([y[:, v] for v in range(n)])
        w0 = np.asarray(evaluate(ast, dict(zip(spec.metric.variables, x.T))), dtype=np.float64)
        w1 = np.asarray(evaluate(ast, dict(zip(spec.metric.variables, y.T))), dtype=np.float64)
        err = max(float(np.max(np.abs(g1 - g0))), float(np.max(np.abs(w1 - w0))))
        if err > tol * max(1.0, float(np.max(np.abs(g0)))):
            raise InputError(f"expression is not 2 pi periodic in {spec.metric.variables[i]} (defect {err:.3e})")


def _node_chunk(args) -> dict[str, np.ndarray]:
    metric, omega_src, k, pts = args
    n = metric.dimension
    order = 2 * k
    space, t = with_parameter(JetSpace.get(n, order))
    g = instantiate_jets(metric, pts, order, space)
    w = instantiate_scalar(omega_src, metric.variables, pts, order, space)
    tj = Jet.variable(space, t)
    gt = MetricJet(einsum("...,...ij->...ij", (w * tj * 2.0).exp(), g.components), n)
    vk = volume_coefficients(solve_expansion(gt, k, top_order=0), k).v[k]
    i1 = vk.space.index([0] * n + [1])
    gval = np.asarray(g.components.value)
    return {
        "v": np.asarray(vk.coeffs[0]),
        "dv": np.asarray(vk.coeffs[i1]),
        "omega": np.asarray(w.value),
        "vol": np.sqrt(np.linalg.det(gval)),
    }


def default_jobs() -> int:
    env = os.environ.get("AMBIENTLAB_JOBS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def torus_node_values(spec: TorusSpec, k: int, jobs: int = 1, chunk: int = 128) -> dict[str, np.ndarray]:
    """Per-node ``v_k``, ``delta v_k``, ``omega`` and ``sqrt(det g)``, in node order."""
    n = spec.n
    if n % 2 == 0 and k > n // 2:
        raise CapabilityError(f"v_k is defined only for k <= n/2 when n is even; k exceeds n/2 (k={k}, n={n})")
    pts = spec.nodes()
    tasks = [(spec.metric, spec.omega, k, pts[i:i + chunk]) for i in range(0, len(pts), chunk)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            parts = list(pool.map(_node_chunk, tasks))
    else:
        parts = [_node_chunk(tk) for tk in tasks]
    out = {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}
    out["points"] = pts
    return out


def functional_gradient_check(spec: TorusSpec, k: int, jobs: int = 1, tol: float = 1e-6) -> VariationReport:
    """``int delta v_k dv_g = -2k int v_k omega dv_g`` by uniform quadrature.

    Also records ``delta F_k = (n - 2k) int v_k omega dv_g`` with
    ``F_k = int v_k dv_g``; at ``k = n/2`` the main identity is the
    conformal invariance of ``F_{n/2}``.
    """
    vals = torus_node_values(spec, k, jobs)
    h = spec.cell_volume()
    dvol = vals["vol"] * h
    lhs = float(np.sum(vals["dv"] * dvol))
    vw = float(np.sum(vals["v"] * vals["omega"] * dvol))
    rhs = -2.0 * k * vw
    scale = float(np.sum(np.abs(vals["dv"]) * dvol))
    n = spec.n
    dF = lhs + n * vw
    rep = compare(f"torus.functional_gradient.n{n}.k{k}", lhs, rhs, tol, scale=scale)
    rep.details.update({"delta_F": dF, "delta_F_predicted": (n - 2 * k) * vw, "integral_vk": float(np.sum(vals["v"] * dvol)),
                        "grid": list(spec.grid)})
    return rep
