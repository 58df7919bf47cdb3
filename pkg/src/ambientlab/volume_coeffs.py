"""Renormalized volume coefficients, symmetric functions and linearization tensors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .errors import CapabilityError, InsufficientOrderError, UsageError
from .fg_expansion import RhoSeries, _base_layout
from .jets import Jet, JetMatrix, JetSpace, einsum, jet_matrix_inverse, remap


# ----- the (x, rho) family ----------------------------------------------------------


@dataclass
class RhoFamily:
    """``g_rho`` and its inverse as jets in ``(x, params, rho)``; ``rho`` is the last variable."""

    series: RhoSeries
    space: JetSpace
    g: Jet
    ginv: Jet
    K: int

    @property
    def rho_var(self) -> int:
        return self.space.n_vars - 1

    def coefficient(self, jet: Jet, k: int, x_order: int | None = None) -> Jet:
        """Coefficient of ``rho^k`` as a base-chart jet."""
        base = self.series.metric.space
        order = self.x_order(k) if x_order is None else x_order
        target = JetSpace.get(base.n_vars, order, base.weights, base.caps)
        var_map = {v: v for v in range(base.n_vars)}
        return remap(jet, target, var_map, {self.rho_var: k})

    def x_order(self, k: int) -> int:
        return self.space.order - k


def rho_family(series: RhoSeries, K: int | None = None) -> RhoFamily:
    g = series.metric
    n, p = _base_layout(g)
    avail = series.available_order()
    K = avail if K is None else K
    if K > avail:
        raise InsufficientOrderError(f"rho-order {K} requested, series has {avail}")
    top = min(series.x_order(a) - (K - a) for a in range(K + 1))
    if top < 0:
        raise InsufficientOrderError("series x-orders too low for the requested rho-order")
    base = g.space
    nv = base.n_vars + 1
    weights = list(base.weights) + [1]
    caps = list(base.caps) + [((nv - 1,), K)]
    space = JetSpace.get(nv, top + K, weights, caps)
    rho = Jet.variable(space, nv - 1)
    var_map = {v: v for v in range(base.n_vars)}
    total = None
    for a in range(K + 1):
        term = remap(series.coefficient(a), space, var_map)
        if a:
            term = term * (rho ** a) * (1.0 / math.factorial(a))
        total = term if total is None else total + term
    ginv = jet_matrix_inverse(JetMatrix.symmetrized(total)).entries
    return RhoFamily(series, space, total, ginv, K)


# ----- volume coefficients ------------------------------------------------------------


@dataclass
class VolumeSeries:
    v: list[Jet]
    v_of_rho: Jet
    family: RhoFamily

    @property
    def K(self) -> int:
        return len(self.v) - 1

    def values(self) -> np.ndarray:
        return np.array([float(np.asarray(vk.value)) for vk in self.v[1:]])


def _check_count(series: RhoSeries, count: int) -> None:
    n = series.n
    if n % 2 == 0 and count > n // 2:
        raise CapabilityError(f"v_k is defined only for k <= n/2 when n is even (k={count}, n={n}); k exceeds n/2")
    if count > series.available_order():
        raise CapabilityError(f"v_{count} needs the expansion to rho-order {count}, have {series.available_order()}")


def volume_coefficients(series: RhoSeries, count: int | None = None) -> VolumeSeries:
    """``v(rho) = (det g_rho / det g_0)^(1/2)`` via the log-determinant derivative."""
    count = series.available_order() if count is None else count
    _check_count(series, count)
    fam = rho_family(series, count)
    rv = fam.rho_var
    dg = fam.g.partial(rv)
    dlog = einsum("...ij,...ji->...", fam.ginv.to_space(dg.space), dg)
    log_det = remap(dlog, fam.space, {v: v for v in range(fam.space.n_vars)}).integrate(rv)
    v_rho = (log_det * 0.5).exp()
    v = [fam.coefficient(v_rho, k) for k in range(count + 1)]
    return VolumeSeries(v, v_rho, fam)


def jet_determinant(m: Jet) -> Jet:
    """Determinant of a symmetric positive-definite jet matrix by pivot-free elimination."""
    a = m
    d = m.shape[-1]
    det = None
    rows = [[a[..., i, j] for j in range(d)] for i in range(d)]
    for k in range(d):
        piv = rows[k][k]
        det = piv if det is None else det * piv
        inv = 1.0 / piv
        for i in range(k + 1, d):
            f = rows[i][k] * inv
            for j in range(k + 1, d):
                rows[i][j] = rows[i][j] - f * rows[k][j]
    return det


def volume_coefficients_direct(series: RhoSeries, count: int, x_order: int = 0) -> list[float]:
    """Cross-check oracle: expand ``det g_rho`` directly at the base point."""
    _check_count(series, count)
    fam = rho_family(series, count)
    n_base = series.metric.space.n_vars
    rho_space = JetSpace.get(1, count)
    g_rho = remap(fam.g, rho_space, {fam.rho_var: 0}, {v: 0 for v in range(n_base)})
    det = jet_determinant(g_rho)
    v_rho = (det * (1.0 / float(det.value))).sqrt()
    return [float(v_rho.coeffs[rho_space.index((k,))]) for k in range(1, count + 1)]


# ----- symmetric functions ----------------------------------------------------------------


@dataclass
class SymmetricFunctionValue:
    A: Jet
    sigma: list[Jet]
    T: list[Jet]

    def T_up(self, ginv: Jet, k: int) -> Jet:
        """``T^{ij}_(k) = T^i_l g^{lj}``."""
        return einsum("...il,...lj->...ij", self.T[k], ginv)


def _identity_like(a: Jet) -> Jet:
    n = a.shape[-1]
    return Jet.constant(a.space, np.broadcast_to(np.eye(n), a.shape).copy())


def sigma_and_newton(A: Jet | np.ndarray, space: JetSpace | None = None) -> SymmetricFunctionValue:
    """``sigma_0..sigma_n`` from power sums, Newton tensors ``T_(0)..T_(n-1)``."""
    if not isinstance(A, Jet):
        A = Jet.constant(space or JetSpace.get(0, 0), np.asarray(A, dtype=np.float64))
    n = A.shape[-1]
    powers = [_identity_like(A)]
    for _ in range(n):
        powers.append(einsum("...ij,...jk->...ik", powers[-1], A))
    p = [None] + [powers[m].trace() for m in range(1, n + 1)]
    sigma = [Jet.constant(A.space, np.ones(A.shape[:-2]))]
    for k in range(1, n + 1):
        acc = None
        for i in range(1, k + 1):
            term = sigma[k - i] * p[i] * ((-1.0) ** (i - 1))
            acc = term if acc is None else acc + term
        sigma.append(acc * (1.0 / k))
    T = []
    for k in range(n):
        acc = None
        for i in range(k + 1):
            term = einsum("...,...ij->...ij", sigma[k - i], powers[i]) * ((-1.0) ** i)
            acc = term if acc is None else acc + term
        T.append(acc)
    return SymmetricFunctionValue(A, sigma, T)


def sigma_k(svalue: SymmetricFunctionValue, k: int) -> Jet:
    if k > len(svalue.sigma) - 1:
        return svalue.sigma[0] * 0.0
    return svalue.sigma[k]


def schouten_endomorphism(P: Jet, ginv: Jet) -> Jet:
    return einsum("...ik,...kj->...ij", ginv, P)


def sigma_trace_forms(P: Jet, ginv: Jet) -> list[Jet]:
    """The trace-polynomial expressions of ``sigma_1..sigma_4``."""
    A = schouten_endomorphism(P, ginv)
    A2 = einsum("...ij,...jk->...ik", A, A)
    A3 = einsum("...ij,...jk->...ik", A2, A)
    A4 = einsum("...ij,...jk->...ik", A3, A)
    J, t2, t3, t4 = A.trace(), A2.trace(), A3.trace(), A4.trace()
    return [
        J,
        (J * J - t2) * 0.5,
        (t3 * 2.0 - J * t2 * 3.0 + J * J * J) * (1.0 / 6.0),
        (t4 * -6.0 + J * t3 * 8.0 + t2 * t2 * 3.0 - J * J * t2 * 6.0 + J * J * J * J) * (1.0 / 24.0),
    ]


# ----- linearization tensors -----------------------------------------------------------------


def linearization_coefficients(vol: VolumeSeries, k: int, tol: float = 1e-10) -> Jet:
    """``L^{ij}_(k)`` from both forms of its defining expression; they must agree."""
    series = vol.family.series
    n = series.n
    if n % 2 == 0 and k > n // 2:
        raise CapabilityError(f"L_(k) needs k <= n/2 for even n (k={k}, n={n})")
    if k > vol.K:
        raise InsufficientOrderError(f"L_({k}) needs v_{k}, have up to v_{vol.K}")
    fam = vol.family
    rv = fam.rho_var
    int_ginv = fam.ginv.integrate(rv)
    prod = einsum("...,...ij->...ij", vol.v_of_rho.to_space(int_ginv.space), int_ginv)
    product_form = fam.coefficient(prod, k) * -1.0
    summed = None
    for l in range(1, k + 1):
        # d^(l-1) g^{ij} at 0 is (l-1)! times the rho^(l-1) coefficient
        d = fam.coefficient(fam.ginv, l - 1, fam.x_order(k)) * float(math.factorial(l - 1))
        term = einsum("...,...ij->...ij", vol.v[k - l].to_space(d.space), d)
        term = term * (-1.0 / math.factorial(l))
        summed = term if summed is None else summed + term
    summed = summed.to_space(product_form.space)
    scale = max(float(np.abs(product_form.coeffs).max()), 1e-300)
    err = float(np.abs(product_form.coeffs - summed.coeffs).max()) / scale
    if err > tol:
        from .errors import InternalConsistencyError

        raise InternalConsistencyError(f"L_({k}) forms disagree (relative {err:.3e})")
    return product_form


# ----- building-block tables -------------------------------------------------------------------

# Words are matrix products with g^{-1} between consecutive letters; "P" is the
# Schouten tensor and "O<l>" the l-th extended obstruction tensor.  G tables give
# (1/2) g^(k)_{ij} as symmetrized words.
G_TABLE: dict[int, list[tuple[Fraction, tuple[str, ...]]]] = {
    1: [(Fraction(1), ("P",))],
    2: [(Fraction(1), ("O1",)), (Fraction(1), ("P", "P"))],
    3: [(Fraction(1), ("O2",)), (Fraction(4), ("P", "O1"))],
    4: [
        (Fraction(1), ("O3",)),
        (Fraction(6), ("P", "O2")),
        (Fraction(4), ("O1", "O1")),
        (Fraction(4), ("P", "O1", "P")),
    ],
    5: [
        (Fraction(1), ("O4",)),
        (Fraction(8), ("P", "O3")),
        (Fraction(14), ("O2", "O1")),
        (Fraction(10), ("P", "O2", "P")),
        (Fraction(16), ("P", "O1", "O1")),
    ],
}

# V tables: products of factors, ("sigma", k) or ("tr", word).
V_TABLE: dict[int, list[tuple[Fraction, tuple]]] = {
    1: [(Fraction(1), (("sigma", 1),))],
    2: [(Fraction(1), (("sigma", 2),))],
    3: [(Fraction(1), (("sigma", 3),)), (Fraction(-1, 3), (("tr", ("P", "O1")),))],
    4: [
        (Fraction(1), (("sigma", 4),)),
        (Fraction(1, 3), (("tr", ("P", "P", "O1")),)),
        (Fraction(-1, 3), (("tr", ("P",)), ("tr", ("P", "O1")))),
        (Fraction(-1, 12), (("tr", ("P", "O2")),)),
        (Fraction(-1, 12), (("tr", ("O1", "O1")),)),
    ],
}


def _letter_weight(letter: str) -> int:
    return 1 if letter == "P" else int(letter[1:]) + 1


def _word_weight(word: Sequence[str]) -> int:
    return sum(_letter_weight(l) for l in word)


def check_tables() -> None:
    """Every tabulated monomial must satisfy ``sum (l+1) d_l = k``."""
    for k, terms in G_TABLE.items():
        for _, word in terms:
            if _word_weight(word) != k:
                raise AssertionError(f"G_{k} term {word} has weight {_word_weight(word)}")
    for k, terms in V_TABLE.items():
        for _, factors in terms:
            w = sum(f[1] if f[0] == "sigma" else _word_weight(f[1]) for f in factors)
            if w != k:
                raise AssertionError(f"V_{k} term {factors} has weight {w}")


check_tables()


@dataclass
class BuildingBlocks:
    G: Jet | None
    V: Jet | None


def _word_product(word: Sequence[str], tensors: Mapping[str, Jet], ginv: Jet) -> Jet:
    out = tensors[word[0]]
    for letter in word[1:]:
        out = einsum("...ia,...ab,...bj->...ij", out, ginv, tensors[letter])
    return out


def building_block_forms(P: Jet, omegas: Mapping[int, Jet] | Sequence[Jet], ginv: Jet, k: int) -> BuildingBlocks:
    """``G_k`` (equal to ``g^(k)``) and ``V_k`` (equal to ``v_k``) from the tables."""
    if not isinstance(omegas, Mapping):
        omegas = {l + 1: o for l, o in enumerate(omegas)}
    if k < 1 or k > 5:
        raise CapabilityError(f"G_k is tabulated for 1 <= k <= 5, got k={k}")
    tensors = {"P": P}
    tensors.update({f"O{l}": o for l, o in omegas.items()})

    def need(word):
        for l in word:
            if l not in tensors:
                raise InsufficientOrderError(f"building block {l} not supplied")

    G = None
    for coef, word in G_TABLE[k]:
        need(word)
        w = _word_product(word, tensors, ginv)
        w = (w + w.swapaxes(-1, -2)) * (0.5 * 2.0 * float(coef))
        G = w if G is None else G + w
    V = None
    if k in V_TABLE:
        sv = sigma_and_newton(schouten_endomorphism(P, ginv))
        for coef, factors in V_TABLE[k]:
            term = None
            for kind, arg in factors:
                if kind == "sigma":
                    f = sigma_k(sv, arg)
                else:
                    need(arg)
                    f = einsum("...ij,...ji->...", _word_product(arg, tensors, ginv), ginv)
                term = f if term is None else term * f
            term = term * float(coef)
            V = term if V is None else V + term
    return BuildingBlocks(G, V)
