"""Formal order-by-order solution of the ambient Einstein equation.

The ambient metric on ``R+ x M x R`` in coordinates ``(t, x^1..x^n, rho)`` is

    2 rho dt^2 + 2 t dt drho + t^2 g_rho,    g_rho = sum_k g^(k) rho^k / k!

and ``g^(k)`` is fixed by requiring the tangential Ricci components to vanish
to increasing order in ``rho``.  Ambient jets are taken about
``(t, x, rho) = (1, base, 0)``; ambient variable ``0`` is ``t``, ``1..n`` are
the chart coordinates, ``n + 1`` is ``rho`` and any base-space parameters
follow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .chart_geometry import MetricJet, christoffel, ricci_from_christoffel, schouten
from .errors import CapabilityError, InsufficientOrderError, InternalConsistencyError, UsageError
from .jets import Jet, JetMatrix, JetSpace, einsum, jet_matrix_inverse, remap

PROBE_TOLERANCE = 1e-10
DEGENERACY_TOLERANCE = 1e-10


@dataclass
class RhoSeries:
    """``coeffs[k]`` is ``d^k g_rho / d rho^k`` at ``rho = 0`` as an x-jet."""

    metric: MetricJet
    K: int
    coeffs: list[Jet]
    x_orders: list[int]
    even_trace: Jet | None = None
    obstruction: Jet | None = None
    affine: list[tuple[float, float]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.metric.n

    @property
    def g(self) -> Jet:
        return self.coeffs[0]

    def coefficient(self, k: int) -> Jet:
        """``g^(k)``; at the obstructed order of an even dimension only the
        pure-trace part is defined and the trace-free part is normalized to 0."""
        if k < len(self.coeffs):
            return self.coeffs[k]
        if self.even_trace is not None and k == self.n // 2:
            return _outer(self.even_trace * (1.0 / self.n), self.g.to_space(self.even_trace.space))
        raise InsufficientOrderError(f"rho-order {k} not computed (K={self.K})")

    def x_order(self, k: int) -> int:
        if k < len(self.x_orders):
            return self.x_orders[k]
        if self.even_trace is not None and k == self.n // 2:
            return self.even_trace.order
        raise InsufficientOrderError(f"rho-order {k} not computed (K={self.K})")

    def value(self, k: int) -> np.ndarray:
        return self.coefficient(k).value

    def as_rho_jet(self, space: JetSpace, rho_var: int, var_map: dict[int, int]) -> Jet:
        """``g_rho`` as a jet in ``space`` with ``rho`` at variable ``rho_var``."""
        rho = Jet.variable(space, rho_var)
        total = None
        top = min(self.available_order(), _rho_cap(space, rho_var))
        for a in range(top + 1):
            term = remap(self.coefficient(a), space, var_map)
            if a:
                term = term * (rho ** a) * (1.0 / math.factorial(a))
            total = term if total is None else total + term
        return total

    def available_order(self) -> int:
        return len(self.coeffs) - 1 + (1 if self.even_trace is not None else 0)


@dataclass
class AmbientMetricJet:
    components: Jet
    n: int
    ambient_order: int
    n_params: int = 0

    @property
    def coords(self) -> tuple[int, ...]:
        return tuple(range(self.n + 2))

    @property
    def space(self) -> JetSpace:
        return self.components.space

    def inverse(self) -> Jet:
        return jet_matrix_inverse(JetMatrix.symmetrized(self.components)).entries

    def base_values(self, t: Jet) -> np.ndarray:
        """Coefficient at ``t = 1, x = base, rho = 0`` with parameters at zero."""
        return t.value


@dataclass
class ObstructionReport:
    n: int
    residual: Jet
    trace_defect: float
    bach_proportionality: float | None = None
    bach_deviation: float | None = None


def _outer(s: Jet, t: Jet) -> Jet:
    return einsum("...,...ij->...ij", s, t)


def _rho_cap(space: JetSpace, v: int) -> int:
    cap = space.order
    for group, bound in space.caps:
        if v in group:
            cap = min(cap, bound)
    return cap


def _base_layout(g: MetricJet):
    base = g.space
    n = g.n
    p = base.n_vars - n
    if any(base.weights[v] != 1 for v in range(n)):
        raise UsageError("chart coordinates must have weight 1")
    for group, _ in base.caps:
        if any(v < n for v in group):
            raise UsageError("caps on chart coordinates are not supported by the ambient solver")
    return n, p


def ambient_space(g: MetricJet, total: int, rho_t_cap: int | None = None, x_cap: int | None = None) -> JetSpace:
    """Jet space for ``(t, x, rho, params)`` mirroring the parameter layout of ``g``."""
    n, p = _base_layout(g)
    base = g.space
    weights = [1] * (n + 2) + [base.weights[n + i] for i in range(p)]
    caps = [(tuple(v + 2 for v in group), bound) for group, bound in base.caps]
    if rho_t_cap is not None:
        caps.append(((0, n + 1), rho_t_cap))
    if x_cap is not None:
        caps.append((tuple(range(1, n + 1)), x_cap))
    return JetSpace.get(n + 2 + p, total, weights, caps)


def _var_map(n: int, p: int) -> dict[int, int]:
    m = {v: v + 1 for v in range(n)}
    m.update({n + i: n + 2 + i for i in range(p)})
    return m


def _x_space(g: MetricJet, order: int) -> JetSpace:
    base = g.space
    return JetSpace.get(base.n_vars, order, base.weights, base.caps)


def block_ambient(space: JetSpace, n: int, g_rho: Jet) -> Jet:
    """Assemble ``2 rho dt^2 + 2 t dt drho + t^2 g_rho`` from a tangential block."""
    t = Jet.variable(space, 0, 1.0)
    rho = Jet.variable(space, n + 1)
    batch = g_rho.shape[:-2]
    c = np.zeros((space.size,) + batch + (n + 2, n + 2))
    c[..., 0, 0] = (2.0 * rho).coeffs.reshape((-1,) + (1,) * len(batch))
    c[..., 0, n + 1] = t.coeffs.reshape((-1,) + (1,) * len(batch))
    c[..., n + 1, 0] = c[..., 0, n + 1]
    c[..., 1:n + 1, 1:n + 1] = einsum("...,...ij->...ij", t * t, g_rho.to_space(space)).coeffs
    return Jet(space, c)


def _ambient_ricci(gt: Jet, n: int) -> Jet:
    coords = tuple(range(n + 2))
    ginv = jet_matrix_inverse(JetMatrix.symmetrized(gt)).entries
    return ricci_from_christoffel(christoffel(gt, ginv, coords), coords)


def _tangential_ricci(gt: Jet, n: int) -> Jet:
    return _ambient_ricci(gt, n)[..., 1:n + 1, 1:n + 1]


class _Stepper:
    """Evaluates the order-k tangential Ricci coefficient for a trial top coefficient."""

    def __init__(self, g: MetricJet, known: list[Jet]):
        self.g = g
        self.known = known
        self.n, self.p = _base_layout(g)
        self.vmap = _var_map(self.n, self.p)

    def residual(self, k: int, q: int, top: Jet | np.ndarray | None, component: str = "tangential") -> Jet:
        """Order-k equation at x-order ``q``: the tangential Ricci block at ``rho^(k-1)``,
        or with ``component="rr"`` the ``rho rho`` Ricci entry at ``rho^(k-2)``."""
        n = self.n
        space = ambient_space(self.g, q + k + 1, rho_t_cap=k + 1, x_cap=q + 2)
        rho = Jet.variable(space, n + 1)
        g_rho = None
        for a, coeff in enumerate(self.known[:k]):
            term = remap(coeff, space, self.vmap)
            if a:
                term = term * (rho ** a) * (1.0 / math.factorial(a))
            g_rho = term if g_rho is None else g_rho + term
        if top is not None:
            if isinstance(top, Jet):
                top_jet = remap(top, space, self.vmap)
            else:
                top_jet = Jet.constant(space, np.asarray(top, dtype=np.float64))
            g_rho = g_rho + top_jet * (rho ** k) * (1.0 / math.factorial(k))
        ric = _ambient_ricci(block_ambient(space, n, g_rho), n)
        if component == "rr":
            ric, fixed = ric[..., n + 1, n + 1], {0: 0, n + 1: k - 2}
        else:
            ric, fixed = ric[..., 1:n + 1, 1:n + 1], {0: 0, n + 1: k - 1}
        inverse_map = {v: k_ for k_, v in self.vmap.items()}
        return remap(ric, _x_space(self.g, q), inverse_map, fixed)


def _frob(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=(-2, -1))


def _probe_constants(stepper: _Stepper, k: int, g0: np.ndarray, seed: int) -> tuple[float, float]:
    """Fit ``residual(S) - residual(0) = a S + b tr(S) g`` at x-order 0.

    Batched metrics are probed member-wise and must share one pair ``(a, b)``.
    """
    n = stepper.n
    if n == 1:
        raise CapabilityError("ambient expansion needs n >= 2")
    base = stepper.residual(k, 0, None).value
    g0inv = np.linalg.inv(g0)
    e = np.zeros((n, n))
    e[0, 1] = e[1, 0] = 1.0
    e = e - (np.einsum("...ij,ji->...", g0inv, e) / n)[..., None, None] * g0
    d1 = stepper.residual(k, 0, e).value - base
    a = _frob(d1, e) / _frob(e, e)
    d2 = stepper.residual(k, 0, g0).value - base
    b = (_frob(d2, g0) / _frob(g0, g0) - a) / n
    rng = np.random.default_rng(seed + 1000 * k)
    s3 = rng.uniform(-1.0, 1.0, size=(n, n))
    s3 = 0.5 * (s3 + s3.T)
    d3 = stepper.residual(k, 0, s3).value - base
    a_mean, b_mean = float(np.mean(a)), float(np.mean(b))
    pred = a_mean * s3 + (b_mean * np.einsum("...ij,ji->...", g0inv, s3))[..., None, None] * g0
    scale = max(np.abs(d3).max(), np.abs(pred).max(), 1e-300)
    if np.abs(d3 - pred).max() > PROBE_TOLERANCE * scale:
        raise InternalConsistencyError(
            f"order {k}: residual is not affine of the form a S + b tr(S) g "
            f"(probe mismatch {np.abs(d3 - pred).max() / scale:.3e})"
        )
    return a_mean, b_mean


def _trace_from_rr(stepper: _Stepper, k: int, q: int, g0: np.ndarray) -> Jet:
    """Trace ``g^{ij} g^(k)_ij`` from the ``rho rho`` equation, used where the
    tangential equation leaves the trace free (``k = n``)."""
    base = stepper.residual(k, 0, None, "rr").value
    c = (stepper.residual(k, 0, g0, "rr").value - base) / stepper.n
    if np.max(np.abs(c - np.mean(c))) > PROBE_TOLERANCE * np.max(np.abs(c)):
        raise InternalConsistencyError(f"order {k}: rho-rho probe differs across the batch")
    c = float(np.mean(c))
    if abs(c) < DEGENERACY_TOLERANCE:
        raise InternalConsistencyError(f"order {k}: rho-rho equation does not see the trace")
    return stepper.residual(k, q, None, "rr") * (-1.0 / c)


def required_order(K: int, top_order: int) -> int:
    return top_order + 2 * K


def solve_expansion(g: MetricJet, K: int, top_order: int | None = None, seed: int = 0) -> RhoSeries:
    """Solve for ``g^(1..K)``.

    ``g^(k)`` is returned to x-order ``top_order + 2 (K - k)``; by default
    ``top_order = g.order - 2K`` which must be at least 2.  For n even and
    ``K = n/2`` the top step only yields the trace, the trace-free part being
    the obstruction.
    """
    n, _ = _base_layout(g)
    if K < 1:
        raise UsageError("K must be at least 1")
    if n < 3:
        raise CapabilityError(f"ambient expansion needs n >= 3, got n={n}")
    even = n % 2 == 0
    if even and K > n // 2:
        raise CapabilityError(f"obstructed order: n={n} is even and K={K} exceeds n/2")
    if top_order is None:
        top_order = g.order - 2 * K
        if top_order < 2:
            raise InsufficientOrderError(f"solve_expansion to K={K} needs metric jet order >= {2 * K + 2}, got {g.order}")
    if top_order < 0 or g.order < required_order(K, top_order):
        raise InsufficientOrderError(
            f"K={K} with top x-order {top_order} needs metric jet order >= {required_order(K, top_order)}, got {g.order}"
        )
    x_orders = [top_order + 2 * K]
    coeffs = [g.components.truncate(x_orders[0])] if g.order > x_orders[0] else [g.components]
    stepper = _Stepper(g, coeffs)
    g0 = g.components.value
    affine: list[tuple[float, float]] = []
    even_trace = obstruction = None
    a1 = None
    for k in range(1, K + 1):
        q = top_order + 2 * (K - k)
        a, b = _probe_constants(stepper, k, g0, seed)
        affine.append((a, b))
        a1 = a if a1 is None else a1
        r0 = stepper.residual(k, q, None)
        gq = coeffs[0].truncate(q) if coeffs[0].order > q else coeffs[0]
        ginv = jet_matrix_inverse(JetMatrix.symmetrized(gq)).entries
        tr_r0 = einsum("...ij,...ij->...", ginv.to_space(r0.space), r0)
        obstructed = even and k == n // 2
        if obstructed:
            if abs(a) > DEGENERACY_TOLERANCE * abs(a1):
                raise InternalConsistencyError(f"expected a degenerate solve at k=n/2, got a={a:.3e}")
            tr_s = tr_r0 * (-1.0 / (a + n * b))
            even_trace = tr_s
            resid = r0 + _outer(tr_s * b, gq.to_space(r0.space))
            tr_res = einsum("...ij,...ij->...", ginv.to_space(r0.space), resid)
            obstruction = resid - _outer(tr_res * (1.0 / n), gq.to_space(r0.space))
            break
        if abs(a) <= DEGENERACY_TOLERANCE * abs(a1):
            raise InternalConsistencyError(f"unexpected degenerate solve at k={k}")
        if abs(a + n * b) <= DEGENERACY_TOLERANCE * abs(a1):
            tr_s = _trace_from_rr(stepper, k, q, g0)
        else:
            tr_s = tr_r0 * (-1.0 / (a + n * b))
        s = (r0 + _outer(tr_s * b, gq.to_space(r0.space))) * (-1.0 / a)
        s = Jet(s.space, 0.5 * (s.coeffs + np.swapaxes(s.coeffs, -1, -2)))
        coeffs.append(s)
        x_orders.append(q)
    return RhoSeries(g, K, coeffs, x_orders, even_trace, obstruction, affine)


def series_residuals(series: RhoSeries, x_order: int = 0, component: str = "tangential") -> list[float]:
    """Max-norm of the Ricci coefficient at each solved order, recomputed
    (``component="rr"`` for the ``rho rho`` entry, orders ``k >= 2``)."""
    g = series.metric
    stepper = _Stepper(g, series.coeffs)
    out = []
    for k in range(1 if component == "tangential" else 2, len(series.coeffs)):
        q = min(x_order, series.x_orders[k])
        r = stepper.residual(k, q, series.coeffs[k], component)
        out.append(float(np.abs(r.coeffs).max()))
    return out


def assemble_ambient(series: RhoSeries, ambient_order: int) -> AmbientMetricJet:
    """The ambient metric as a jet of total order ``ambient_order`` in ``(t, x, rho)``."""
    g = series.metric
    n, p = _base_layout(g)
    M = int(ambient_order)
    if M < 0:
        raise UsageError("ambient order must be non-negative")
    if series.available_order() < M:
        raise InsufficientOrderError(f"ambient order {M} needs rho-order {M}, series has {series.available_order()}")
    for a in range(M + 1):
        if series.x_order(a) < M - a:
            raise InsufficientOrderError(
                f"ambient order {M} needs g^({a}) to x-order {M - a}, have {series.x_order(a)}"
            )
    space = ambient_space(g, M)
    g_rho = series.as_rho_jet(space, n + 1, _var_map(n, p))
    return AmbientMetricJet(block_ambient(space, n, g_rho), n, M, p)


def ambient_ricci(amb: AmbientMetricJet) -> Jet:
    coords = amb.coords
    ginv = amb.inverse()
    return ricci_from_christoffel(christoffel(amb.components, ginv, coords), coords)


def closed_form_series(g: MetricJet, K: int) -> RhoSeries:
    """``g + 2 P rho + P.P rho^2`` for Einstein or locally conformally flat metrics."""
    n = g.n
    if n % 2 == 0 and K > n // 2:
        raise CapabilityError(f"obstructed order: n={n} is even and K={K} exceeds n/2")
    sch = schouten(g)
    P = sch.P.jet
    ginv = g.inverse()
    PP = einsum("...ik,...kl,...lj->...ij", P, ginv.to_space(P.space), P)
    space = P.space
    zero = Jet.zeros(space, (n, n))
    raw = [g.components.to_space(space), 2.0 * P, 2.0 * PP]
    coeffs = [raw[k] if k < 3 else zero for k in range(K + 1)]
    even_trace = None
    if n % 2 == 0 and K == n // 2:
        top = coeffs.pop()
        even_trace = einsum("...ij,...ij->...", ginv.to_space(space), top)
    orders = [space.order] * len(coeffs)
    return RhoSeries(g, K, coeffs, orders, even_trace, None, [])


def obstruction_residual(g: MetricJet, top_order: int = 0) -> ObstructionReport:
    """The trace-free leftover of the order-n/2 equation (n even)."""
    n = g.n
    if n % 2:
        raise CapabilityError(f"obstruction residual needs even n, got n={n}")
    K = n // 2
    need = max(n + 2, required_order(K, top_order))
    if g.order < need:
        raise InsufficientOrderError(f"obstruction residual needs metric jet order >= {need}, got {g.order}")
    series = solve_expansion(g, K, top_order=top_order)
    res = series.obstruction
    ginv = g.inverse().to_space(res.space)
    tr = einsum("...ij,...ij->...", ginv, res)
    defect = float(np.abs(tr.value).max() / max(np.abs(res.value).max(), 1e-300))
    report = ObstructionReport(n, res, defect)
    if n == 4:
        from .chart_geometry import geometry

        B = geometry(g, with_bach=True).B.value
        r = res.value
        bb = _frob(B, B)
        if bb > 0:
            c = _frob(r, B) / bb
            report.bach_proportionality = c
            report.bach_deviation = float(np.linalg.norm(r - c * B) / max(np.linalg.norm(r), 1e-300))
        else:
            report.bach_proportionality = 0.0
            report.bach_deviation = float(np.linalg.norm(r))
    return report
