"""Tensor calculus on jet-valued components in a coordinate chart.

Curvature convention: ``R_ijkl = <R(d_i, d_j) d_l, d_k>`` with
``R(X, Y) = [nabla_X, nabla_Y] - nabla_[X,Y]``, so ``Ric_jl = g^ik R_ijkl``
is positive on round spheres and the unit sphere has
``R_ijkl = g_ik g_jl - g_il g_jk``.  The Schouten tensor is
``P = (Ric - J g) / (n - 2)`` with ``J = Scal / (2(n - 1))``, the Weyl
tensor is ``W_ijkl = R_ijkl - (P_ik g_jl + P_jl g_ik - P_il g_jk - P_jk g_il)``
and the Bach tensor is ``B_ij = P_ij,k^k - P_ik,j^k - P^kl W_kijl``.
This choice is validated operationally by the check ``g'(0) = 2P`` of the
ambient expansion and by the Bach divergence identity.

Covariant derivative slots are appended last, so ``P_ij,k`` is stored with
shape ``(..., i, j, k)``.  All functions accept leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CapabilityError, InsufficientOrderError, SingularInputError, UsageError
from .jets import Jet, JetMatrix, einsum, jet_matrix_inverse, stack

_LABELS = "abcdefghijkl"


@dataclass(frozen=True)
class TensorJet:
    """Jet-valued tensor with slot variance, ``'d'`` covariant and ``'u'`` contravariant."""

    jet: Jet
    variance: tuple[str, ...]

    def __post_init__(self):
        shape = self.jet.shape[len(self.jet.shape) - len(self.variance):] if self.variance else ()
        if len(set(shape)) > 1:
            raise UsageError(f"tensor slots must share one extent, got {shape}")
        if any(v not in ("u", "d") for v in self.variance):
            raise UsageError(f"bad variance {self.variance}")

    @property
    def n(self) -> int:
        return self.jet.shape[-1] if self.variance else 0

    @property
    def order(self) -> int:
        return self.jet.order

    @property
    def value(self):
        return self.jet.value


@dataclass(frozen=True)
class ConnectionJet:
    """Christoffel symbols ``gamma[k, i, j] = Gamma^k_ij``."""

    gamma: Jet
    coords: tuple[int, ...]

    @property
    def tensor(self) -> TensorJet:
        return TensorJet(self.gamma, ("u", "d", "d"))


@dataclass(frozen=True)
class MetricJet:
    """Riemannian metric on an n-dimensional chart.

    Variables ``0..n-1`` of the jet space are the chart coordinates; any
    further variables are parameters (e.g. a variation parameter) and are
    never differentiated.
    """

    components: Jet
    n: int

    def __post_init__(self):
        c = self.components
        if c.shape[-2:] != (self.n, self.n):
            raise UsageError(f"metric components of shape {c.shape} do not match n={self.n}")
        if c.n_vars < self.n:
            raise UsageError("jet space has fewer variables than chart dimensions")
        coeffs = c.coeffs
        if not np.allclose(coeffs, np.swapaxes(coeffs, -1, -2), rtol=0, atol=1e-14 * max(1.0, c.scale())):
            raise UsageError("metric components are not symmetric")
        try:
            eig = np.linalg.eigvalsh(c.value)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - numpy detail
            raise SingularInputError(str(exc)) from exc
        if not np.all(np.isfinite(eig)) or np.any(eig <= 0):
            raise SingularInputError("metric constant term is not positive definite")

    @property
    def order(self) -> int:
        return self.components.order

    @property
    def coords(self) -> tuple[int, ...]:
        return tuple(range(self.n))

    @property
    def space(self):
        return self.components.space

    def inverse(self) -> Jet:
        return jet_matrix_inverse(JetMatrix.symmetrized(self.components)).entries


def _require(order: int, need: int, what: str) -> None:
    if order < need:
        raise InsufficientOrderError(f"{what} needs jet order >= {need}, got {order}")


def gradient(t: Jet, coords: Sequence[int]) -> Jet:
    """Partial derivatives stacked along a new last axis."""
    return stack([t.partial(v) for v in coords], axis=-1)


def christoffel(g: Jet, ginv: Jet, coords: Sequence[int]) -> Jet:
    """``Gamma^k_ij`` stored as ``[..., k, i, j]``."""
    dg = gradient(g, coords)  # [..., i, j, a] = d_a g_ij
    first = 0.5 * (einsum("...jli->...lij", dg) + einsum("...ilj->...lij", dg) - einsum("...ijl->...lij", dg))
    return einsum("...kl,...lij->...kij", ginv, first)


def riemann_from_christoffel(gamma: Jet, g: Jet, coords: Sequence[int]) -> Jet:
    """``R_ijkl = g_km R^m_lij`` with ``R^m_lij`` the standard component."""
    dgam = gradient(gamma, coords)  # [..., m, j, k, i] = d_i Gamma^m_jk
    term = einsum("...mjki->...mkij", dgam) - einsum("...mikj->...mkij", dgam)
    quad = einsum("...mip,...pjk->...mkij", gamma, gamma)
    rup = term + quad - quad.swapaxes(-1, -2)
    return einsum("...km,...mlij->...ijkl", g, rup)


def ricci_from_christoffel(gamma: Jet, coords: Sequence[int]) -> Jet:
    """``Ric_jk = d_i Gamma^i_jk - d_j Gamma^i_ik + Gamma^i_ip Gamma^p_jk - Gamma^i_jp Gamma^p_ik``."""
    dgam = gradient(gamma, coords)
    div = einsum("...ijki->...jk", dgam)
    grad_tr = einsum("...iikj->...jk", dgam)
    tr = einsum("...iip->...p", gamma)
    quad1 = einsum("...p,...pjk->...jk", tr, gamma)
    quad2 = einsum("...ijp,...pik->...jk", gamma, gamma)
    return div - grad_tr + quad1 - quad2


def ricci(g: Jet, coords: Sequence[int], ginv: Jet | None = None) -> Jet:
    if ginv is None:
        ginv = jet_matrix_inverse(g).entries
    return ricci_from_christoffel(christoffel(g, ginv, coords), coords)


@dataclass(frozen=True)
class Curvature:
    gamma: ConnectionJet
    riemann: TensorJet
    ricci: TensorJet
    scalar: Jet
    ginv: Jet


def levi_civita_curvature(g: MetricJet) -> Curvature:
    _require(g.order, 2, "curvature")
    ginv = g.inverse()
    gam = christoffel(g.components, ginv, g.coords)
    rm = riemann_from_christoffel(gam, g.components, g.coords)
    ric = einsum("...ik,...ijkl->...jl", ginv, rm)
    scal = einsum("...jk,...jk->...", ginv, ric)
    return Curvature(ConnectionJet(gam, g.coords), TensorJet(rm, ("d",) * 4), TensorJet(ric, ("d", "d")), scal, ginv)


def covariant_derivative(t: TensorJet | Jet, conn: ConnectionJet, variance: Sequence[str] | None = None) -> TensorJet:
    """Append one covariant slot: ``(nabla_m T)`` stored at the last axis."""
    if isinstance(t, TensorJet):
        jet, var = t.jet, tuple(t.variance)
    else:
        jet, var = t, tuple(variance or ())
    _require(jet.order, 1, "covariant derivative")
    gam = conn.gamma
    out = gradient(jet, conn.coords)
    r = len(var)
    letters = _LABELS[:r]
    for s, kind in enumerate(var):
        with_p = letters[:s] + "p" + letters[s + 1:]
        if kind == "d":
            out = out - einsum(f"...pm{letters[s]},...{with_p}->...{letters}m", gam, jet)
        else:
            out = out + einsum(f"...{letters[s]}mp,...{with_p}->...{letters}m", gam, jet)
    return TensorJet(out, var + ("d",))


@dataclass(frozen=True)
class Schouten:
    P: TensorJet
    J: Jet


def _schouten_from(g: Jet, ric: Jet, scal: Jet, n: int) -> tuple[Jet, Jet]:
    if n < 3:
        raise CapabilityError(f"Schouten tensor needs n >= 3, got n={n}")
    J = scal * (1.0 / (2.0 * (n - 1)))
    P = (ric - _outer_scalar(J, g)) * (1.0 / (n - 2))
    return P, J


def _outer_scalar(s: Jet, t: Jet) -> Jet:
    return einsum("...,...ij->...ij", s, t)


def schouten(g: MetricJet, curv: Curvature | None = None) -> Schouten:
    if g.n < 3:
        raise CapabilityError(f"Schouten tensor needs n >= 3, got n={g.n}")
    curv = curv or levi_civita_curvature(g)
    P, J = _schouten_from(g.components, curv.ricci.jet, curv.scalar, g.n)
    return Schouten(TensorJet(P, ("d", "d")), J)


def kulkarni_nomizu_pg(P: Jet, g: Jet) -> Jet:
    """``P_ik g_jl + P_jl g_ik - P_il g_jk - P_jk g_il`` as ``[..., i, j, k, l]``."""
    return (
        einsum("...ik,...jl->...ijkl", P, g)
        + einsum("...jl,...ik->...ijkl", P, g)
        - einsum("...il,...jk->...ijkl", P, g)
        - einsum("...jk,...il->...ijkl", P, g)
    )


@dataclass(frozen=True)
class ConformalTensors:
    W: TensorJet
    C: TensorJet
    B: TensorJet


@dataclass
class Geometry:
    """Bundle of base-metric quantities computed once and reused."""

    metric: MetricJet
    curvature: Curvature
    P: Jet
    J: Jet
    W: Jet
    dP: Jet
    C: Jet
    B: Jet | None
    ddP: Jet | None

    @property
    def g(self) -> Jet:
        return self.metric.components

    @property
    def ginv(self) -> Jet:
        return self.curvature.ginv

    @property
    def conn(self) -> ConnectionJet:
        return self.curvature.gamma

    def nabla(self, t: Jet, variance: Sequence[str]) -> Jet:
        return covariant_derivative(t, self.conn, variance).jet


def geometry(g: MetricJet, with_bach: bool = True) -> Geometry:
    """Curvature, Schouten, Weyl, Cotton and (optionally) Bach of ``g``."""
    need = 4 if with_bach else 3
    _require(g.order, need, "conformal curvature tensors")
    if g.n < 3:
        raise CapabilityError(f"conformal tensors need n >= 3, got n={g.n}")
    curv = levi_civita_curvature(g)
    P, J = _schouten_from(g.components, curv.ricci.jet, curv.scalar, g.n)
    W = curv.riemann.jet - kulkarni_nomizu_pg(P, g.components)
    dP = covariant_derivative(P, curv.gamma, ("d", "d")).jet
    C = dP - dP.swapaxes(-1, -2)
    B = ddP = None
    if with_bach:
        ddP = covariant_derivative(dP, curv.gamma, ("d", "d", "d")).jet
        ginv = curv.ginv
        lap = einsum("...kl,...ijkl->...ij", ginv, ddP)
        cross = einsum("...kl,...ikjl->...ij", ginv, ddP)
        Pup = einsum("...ka,...lb,...ab->...kl", ginv, ginv, P)
        B = lap - cross - einsum("...kl,...kijl->...ij", Pup, W)
    return Geometry(g, curv, P, J, W, dP, C, B, ddP)


def classical_conformal_tensors(g: MetricJet) -> ConformalTensors:
    geo = geometry(g, with_bach=True)
    return ConformalTensors(TensorJet(geo.W, ("d",) * 4), TensorJet(geo.C, ("d",) * 3), TensorJet(geo.B, ("d", "d")))


def raise_index(t: Jet, ginv: Jet, slot: int) -> Jet:
    """Raise one slot of ``t`` (counted among its last ``rank`` axes) with ``ginv``."""
    nd = t.ndim
    slot = slot % nd
    letters = _LABELS[:nd]
    src = letters[:slot] + "p" + letters[slot + 1:]
    return einsum(f"{letters[slot]}p,{src}->{letters}", ginv, t) if nd else t
