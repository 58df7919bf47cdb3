"""Covariant derivatives of the ambient curvature at ``rho = 0, t = 1``.

Ambient index labels: ``0`` for the ``t`` direction, chart indices ``1..n``
and ``inf`` (written ``∞`` in patterns) for ``rho``.  In an index pattern such
as ``"∞ij∞,∞"`` lowercase letters are free chart slots, ``0``/``∞`` are fixed
and commas are ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .chart_geometry import MetricJet, christoffel, covariant_derivative, riemann_from_christoffel, ConnectionJet
from .errors import CapabilityError, InsufficientOrderError, UsageError
from .fg_expansion import (
    AmbientMetricJet,
    RhoSeries,
    _base_layout,
    _var_map,
    ambient_space,
    assemble_ambient,
    block_ambient,
    solve_expansion,
)
from .jets import Jet, JetMatrix, JetSpace, einsum, jet_matrix_inverse, remap

INF_SYMBOLS = ("∞", "*", "I")


def parse_pattern(pattern: str, n: int) -> tuple[list, list[str]]:
    """Slots as ``int`` (fixed ambient axis) or ``str`` (free chart letter)."""
    slots: list = []
    free: list[str] = []
    for ch in pattern.replace(",", "").replace(" ", ""):
        if ch == "0":
            slots.append(0)
        elif ch in INF_SYMBOLS:
            slots.append(n + 1)
        elif ch.isalpha() and ch.islower():
            slots.append(ch)
            if ch not in free:
                free.append(ch)
        else:
            raise UsageError(f"bad ambient index symbol {ch!r} in {pattern!r}")
    return slots, free


def ambient_index(labels: Sequence, n: int) -> tuple[int, ...]:
    """Labels ``0``, chart indices ``1..n`` or ``"inf"``/``"∞"`` to ambient axes."""
    out = []
    for lab in labels:
        if lab in ("inf", "∞", "*"):
            out.append(n + 1)
        else:
            v = int(lab)
            if not 0 <= v <= n:
                raise UsageError(f"ambient index {lab!r} out of range for n={n}")
            out.append(v)
    return tuple(out)


@dataclass
class CurvatureTable:
    """``nabla^r R~`` with all slots ambient; ``jet`` lives in the ambient space."""

    r: int
    n: int
    jet: Jet
    base_space: JetSpace
    n_params: int = 0

    @property
    def values(self) -> np.ndarray:
        return self.jet.value

    def component(self, index: Sequence[int]) -> float:
        idx = tuple(index)
        if len(idx) != 4 + self.r:
            raise UsageError(f"index of length {len(idx)} for a table with r={self.r}")
        return float(self.values[idx])

    def __getitem__(self, index) -> float:
        return self.component(index)

    def at_base(self) -> Jet:
        """The table restricted to ``t = 1, rho = 0`` as a base-chart jet."""
        n, p = self.n, self.n_params
        inv = {v + 1: v for v in range(n)}
        inv.update({n + 2 + i: n + i for i in range(p)})
        target = JetSpace.get(self.base_space.n_vars, self.jet.order, self.base_space.weights, self.base_space.caps)
        return remap(self.jet, target, inv, {0: 0, n + 1: 0})

    def block(self, pattern: str) -> Jet:
        """Sub-tensor for an index pattern, free letters in order of appearance."""
        slots, free = parse_pattern(pattern, self.n)
        if len(slots) != 4 + self.r:
            raise UsageError(f"pattern {pattern!r} has {len(slots)} slots, table needs {4 + self.r}")
        base = self.at_base()
        chart = slice(1, self.n + 1)
        sel = tuple(chart if isinstance(s, str) else s for s in slots)
        sub = Jet(base.space, base.coeffs[(slice(None),) + sel])
        letters = "".join(s for s in slots if isinstance(s, str))
        out = "".join(free)
        if letters == out:
            return sub
        return einsum(f"{letters}->{out}", sub)


def _iterated_tables(amb_components: Jet, n: int, r_max: int, base_space: JetSpace, p: int) -> list[CurvatureTable]:
    coords = tuple(range(n + 2))
    ginv = jet_matrix_inverse(JetMatrix.symmetrized(amb_components)).entries
    gam = christoffel(amb_components, ginv, coords)
    riem = riemann_from_christoffel(gam, amb_components, coords)
    conn = ConnectionJet(gam, coords)
    tables = [CurvatureTable(0, n, riem, base_space, p)]
    cur = riem
    for r in range(1, r_max + 1):
        cur = covariant_derivative(cur, conn, ("d",) * (3 + r)).jet
        tables.append(CurvatureTable(r, n, cur, base_space, p))
    return tables


def ambient_curvature_derivatives(ambient: AmbientMetricJet, r: int, base_space: JetSpace | None = None) -> CurvatureTable:
    """``nabla^r R~`` of an assembled ambient metric."""
    if ambient.ambient_order < r + 2:
        raise InsufficientOrderError(f"r={r} needs ambient order >= {r + 2}, got {ambient.ambient_order}")
    base_space = base_space or _default_base_space(ambient)
    return _iterated_tables(ambient.components, ambient.n, r, base_space, ambient.n_params)[r]


def _default_base_space(ambient: AmbientMetricJet) -> JetSpace:
    s = ambient.space
    n, p = ambient.n, ambient.n_params
    weights = [1] * n + list(s.weights[n + 2:])
    caps = []
    for group, bound in s.caps:
        if all(v >= n + 2 for v in group):
            caps.append((tuple(v - 2 for v in group), bound))
    return JetSpace.get(n + p, 0, weights, caps)


# ----- conformal curvature set ----------------------------------------------------


def _check_defined(n: int, k: int, strict: bool, what: str) -> None:
    if n % 2 == 0:
        ok = n > 2 * (k + 1) if strict else n >= 2 * (k + 1)
        if not ok:
            rel = ">" if strict else ">="
            raise CapabilityError(f"{what} for k={k} needs n odd or n {rel} {2 * (k + 1)}, got n={n}")


@dataclass
class ConformalCurvatureSet:
    """Tables ``nabla^r R~`` for ``r < k_max`` plus the series they came from."""

    metric: MetricJet
    series: RhoSeries
    tables: list[CurvatureTable]
    k_max: int
    omega: dict[int, Jet] = field(default_factory=dict)
    cotton: dict[int, Jet] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.metric.n

    def table(self, r: int) -> CurvatureTable:
        if r >= len(self.tables):
            raise InsufficientOrderError(f"table r={r} not computed (k_max={self.k_max})")
        return self.tables[r]

    def Omega(self, k: int) -> Jet:
        _check_defined(self.n, k, True, "extended obstruction tensor")
        if k not in self.omega:
            self.omega[k] = self.table(k - 1).block("∞ij∞" + "∞" * (k - 1))
        return self.omega[k]

    def C(self, k: int) -> Jet:
        _check_defined(self.n, k, False, "higher Cotton tensor")
        if k not in self.cotton:
            tab = self.table(k - 1)
            tail = "∞" * (k - 1)
            first = tab.block("∞ijl" + tail)
            total = first + first.swapaxes(0, 1)
            for pos in range(k - 1):
                total = total + tab.block("∞ij∞" + "∞" * pos + "l" + "∞" * (k - 2 - pos))
            self.cotton[k] = total
        return self.cotton[k]


def conformal_curvature_set(g: MetricJet, k_max: int, series: RhoSeries | None = None) -> ConformalCurvatureSet:
    """Solve the expansion and tabulate ``nabla^r R~`` for ``r = 0..k_max-1``."""
    n, p = _base_layout(g)
    if k_max < 1:
        raise UsageError("k_max must be at least 1")
    M = k_max + 1
    if n % 2 == 0 and M > n // 2:
        raise CapabilityError(f"conformal curvature through k={k_max} needs n odd or n >= {2 * M}, got n={n}")
    if series is None:
        need = 2 * M
        if g.order < need:
            raise InsufficientOrderError(f"k_max={k_max} needs metric jet order >= {need}, got {g.order}")
        series = solve_expansion(g, M, top_order=0)
    amb = assemble_ambient(series, M)
    base_space = JetSpace.get(g.space.n_vars, 0, g.space.weights, g.space.caps)
    tables = _iterated_tables(amb.components, n, k_max - 1, base_space, p)
    return ConformalCurvatureSet(g, series, tables, k_max)


def extended_obstruction(g: MetricJet, k: int) -> Jet:
    _check_defined(g.n, k, True, "extended obstruction tensor")
    return conformal_curvature_set(g, k).Omega(k)


def higher_cotton(g: MetricJet, k: int) -> Jet:
    _check_defined(g.n, k, False, "higher Cotton tensor")
    return conformal_curvature_set(g, k).C(k)


def omega2_from_curvature(g: MetricJet) -> Jet:
    """Second extended obstruction tensor from base curvature, ``n != 4, 6``.

    ``(n-4)(n-6) Omega2 = B_ij,k^k - 2 W_kijl B^kl - 4 J B_ij + (n-4)(4 P^kl C_(ij)k,l
    - 2 C^k_i^l C_ljk + C_i^kl C_jkl + 2 J_,l C_(ij)^l - 2 W_kijl P^k_m P^ml)``.
    """
    from .chart_geometry import geometry

    n = g.n
    if n in (4, 6):
        raise CapabilityError(f"the closed form has a pole at n={n}")
    if g.order < 6:
        raise InsufficientOrderError(f"Omega2 closed form needs metric jet order >= 6, got {g.order}")
    geo = geometry(g)
    gi = geo.ginv
    dB = geo.nabla(geo.B, "dd")
    lapB = einsum("...kl,...ijkl->...ij", gi, geo.nabla(dB, "ddd"))
    Bup = einsum("...ka,...lb,...ab->...kl", gi, gi, geo.B)
    Csym = (geo.C + geo.C.swapaxes(-3, -2)) * 0.5
    dCsym = geo.nabla(Csym, "ddd")
    Pup = einsum("...ka,...lb,...ab->...kl", gi, gi, geo.P)
    PP = einsum("...ka,...ab,...bl->...kl", Pup, geo.g, Pup)
    dJ = geo.nabla(geo.J, "")
    lead = lapB - 2.0 * einsum("...kijl,...kl->...ij", geo.W, Bup) - 4.0 * einsum("...,...ij->...ij", geo.J, geo.B)
    rest = (
        4.0 * einsum("...kl,...ijkl->...ij", Pup, dCsym)
        - 2.0 * einsum("...ka,...lb,...aib,...ljk->...ij", gi, gi, geo.C, geo.C)
        + einsum("...ka,...lb,...iab,...jkl->...ij", gi, gi, geo.C, geo.C)
        + 2.0 * einsum("...l,...la,...ija->...ij", dJ, gi, Csym)
        - 2.0 * einsum("...kijl,...kl->...ij", geo.W, PP)
    )
    return (lead + rest * (n - 4.0)) * (1.0 / ((n - 4.0) * (n - 6.0)))


# ----- table invariants -------------------------------------------------------------


def _rel(err: float, scale: float) -> float:
    return err / scale if scale > 0 else err


def symmetry_defects(table: CurvatureTable) -> dict[str, float]:
    v = table.values
    scale = float(np.abs(v).max())
    rest = tuple(range(4, v.ndim))
    return {
        "skew12": _rel(float(np.abs(v + v.transpose((1, 0, 2, 3) + rest)).max()), scale),
        "skew34": _rel(float(np.abs(v + v.transpose((0, 1, 3, 2) + rest)).max()), scale),
        "pair": _rel(float(np.abs(v - v.transpose((2, 3, 0, 1) + rest)).max()), scale),
    }


def zero_index_defect(tables: Sequence[CurvatureTable]) -> float:
    """Max relative violation of ``R~_{IJK0,M1..Mr} = -sum_s R~_{IJK M_s, M1..^..Mr}``."""
    worst = 0.0
    for r, tab in enumerate(tables):
        v = tab.values
        lhs = v[:, :, :, 0]
        scale = float(np.abs(v).max()) or 1.0
        rhs = np.zeros_like(lhs)
        if r:
            prev = tables[r - 1].values
            ms = "mnopqrs"[:r]
            for j in range(r):
                src = "abc" + ms[j] + ms[:j] + ms[j + 1:]
                rhs = rhs - np.einsum(f"{src}->abc{ms}", prev)
        worst = max(worst, float(np.abs(lhs - rhs).max()) / scale)
    return worst


# ----- Lambda series --------------------------------------------------------------


def lambda_series(series: RhoSeries, k: int, rho_order: int | None = None) -> Jet:
    """``Lambda^(k)(rho) = R~_{inf ij inf, inf..inf}`` at ``t = 1`` and the base point,
    as a jet in ``(rho, params)``."""
    g = series.metric
    n, p = _base_layout(g)
    r = k - 1
    avail = series.available_order()
    if rho_order is None:
        rho_order = avail - (r + 2)
    if rho_order < 0 or r + 2 + rho_order > avail:
        raise InsufficientOrderError(f"Lambda^({k}) to rho-order {rho_order} needs series order {r + 2 + rho_order}")
    total = r + 2 + rho_order
    for a in range(total + 1):
        if series.x_order(a) < min(r + 2, total - a):
            raise InsufficientOrderError(f"g^({a}) needs x-order {min(r + 2, total - a)}")
    space = ambient_space(g, total)
    tx = (0,) + tuple(range(1, n + 1))
    space = JetSpace.get(space.n_vars, total, space.weights, space.caps + ((tx, r + 2),))
    g_rho = series.as_rho_jet(space, n + 1, _var_map(n, p))
    gt = block_ambient(space, n, g_rho)
    base_space = JetSpace.get(g.space.n_vars, 0, g.space.weights, g.space.caps)
    tab = _iterated_tables(gt, n, r, base_space, p)[r]
    sel = (slice(None), n + 1, slice(1, n + 1), slice(1, n + 1), n + 1) + (n + 1,) * r
    sub = Jet(tab.jet.space, tab.jet.coeffs[sel])
    rho_space = rho_jet_space(g, rho_order)
    inv = {n + 1: 0}
    inv.update({n + 2 + i: 1 + i for i in range(p)})
    return remap(sub, rho_space, inv, {0: 0, **{v: 0 for v in range(1, n + 1)}})


def rho_jet_space(g: MetricJet, order: int) -> JetSpace:
    n, p = _base_layout(g)
    s = g.space
    weights = [1] + list(s.weights[n:])
    caps = [(tuple(v - n + 1 for v in group), b) for group, b in s.caps]
    return JetSpace.get(1 + p, order, weights, caps)


def metric_rho_jet(series: RhoSeries, order: int) -> Jet:
    """``g_rho`` at the base point as a jet in ``(rho, params)``."""
    g = series.metric
    n, p = _base_layout(g)
    space = rho_jet_space(g, order)
    vmap = {n + i: 1 + i for i in range(p)}
    fixed_zero = {v: 0 for v in range(n)}
    rho = Jet.variable(space, 0)
    total = None
    for a in range(min(order, series.available_order()) + 1):
        term = remap(series.coefficient(a), space, vmap, fixed_zero)
        if a:
            term = term * (rho ** a) * (1.0 / math.factorial(a))
        total = term if total is None else total + term
    return total


# ----- cotractor transport ------------------------------------------------------------


def p_matrix(omega_grad: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    """``p^A_I`` with rows/columns ordered ``0, 1..n, inf``."""
    w = np.asarray(omega_grad, dtype=np.float64)
    n = w.shape[-1]
    w_up = ginv @ w
    p = np.zeros((n + 2, n + 2))
    p[0, 0] = 1.0
    p[0, 1:n + 1] = w
    p[0, n + 1] = -0.5 * float(w @ w_up)
    p[1:n + 1, 1:n + 1] = np.eye(n)
    p[1:n + 1, n + 1] = -w_up
    p[n + 1, n + 1] = 1.0
    return p


def _budget(slots: Sequence[int], n: int) -> None:
    if n % 2 == 0:
        s_inf = sum(1 for s in slots if s == n + 1)
        s_m = sum(1 for s in slots if 1 <= s <= n)
        if s_m + 2 * s_inf > n + 1:
            raise CapabilityError(f"index budget s_M + 2 s_inf = {s_m + 2 * s_inf} exceeds n+1 = {n + 1}")


def transport_block(table: CurvatureTable, omega_grad: np.ndarray, ginv: np.ndarray, pattern: str) -> np.ndarray:
    """Right-hand side of the cotractor law for every free chart value in ``pattern``."""
    n = table.n
    slots, free = parse_pattern(pattern, n)
    if len(slots) != 4 + table.r:
        raise UsageError(f"pattern {pattern!r} has the wrong number of slots")
    _budget([1 if isinstance(s, str) else s for s in slots], n)
    p = p_matrix(omega_grad, ginv)
    slot_labels = "ABCDEFGHIJKL"[:len(slots)]
    ops, subs = [], []
    for lab, sl in zip(slot_labels, slots):
        if isinstance(sl, str):
            ops.append(p[:, 1:n + 1])
            subs.append(lab + sl)
        else:
            ops.append(p[:, sl])
            subs.append(lab)
    spec = ",".join([slot_labels] + subs) + "->" + "".join(free)
    return np.einsum(spec, table.values, *ops, optimize=True)


def cotractor_transport(table: CurvatureTable, omega_grad: np.ndarray, ginv: np.ndarray, target: Sequence[int]) -> float:
    """Predicted ``e^{2(s_inf - 1) omega}`` times the hatted component at ``target``."""
    n = table.n
    idx = tuple(int(i) for i in target)
    if len(idx) != 4 + table.r:
        raise UsageError("target length does not match the table")
    _budget(idx, n)
    p = p_matrix(omega_grad, ginv)
    v = table.values
    for s in reversed(idx):
        v = v @ p[:, s]
    return float(v)


def transport_weight(target_slots: Sequence[int], n: int) -> int:
    """``s_inf - 1`` for the conformal weight factor."""
    return sum(1 for s in target_slots if s == n + 1) - 1
