"""Dense truncated multivariate Taylor jets.

A jet about a base point stores, for every multi-index ``alpha`` of a
truncation set, the coefficient ``(d^alpha f)(base) / alpha!``.  The
truncation set is always downward closed.  By default it is "total degree
<= order", but a space may also carry

* per-variable weights (0 or 1) entering the total degree; a weight-0
  variable is a *parameter* whose degree does not consume order, and
* extra caps ``sum(alpha[v] for v in group) <= bound``.

Parameter variables (weight 0, cap 1) carry exact first variations through
a whole computation.  Group caps let the ambient solver keep the x-order high
while the (t, rho) order stays small.

Coefficients are stored coefficient-first: ``coeffs.shape == (N, *shape)``,
so one :class:`Jet` may hold a whole tensor of jets sharing a space.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numba import njit

from .errors import InsufficientOrderError, SingularInputError, UsageError

__all__ = [
    "JetSpace",
    "Jet",
    "JetMatrix",
    "jet_arith",
    "jet_analytic",
    "jet_partial",
    "jet_matrix_inverse",
    "einsum",
    "stack",
    "CONDITION_LIMIT",
]

CONDITION_LIMIT = 1e12

_SPACE_LOCK = threading.RLock()
_SPACES: dict[tuple, "JetSpace"] = {}


@njit(cache=True)
def _mul_kernel(a, b, pi, pj, pk, out):
    m_size = a.shape[1]
    for p in range(pi.shape[0]):
        i = pi[p]
        j = pj[p]
        k = pk[p]
        for m in range(m_size):
            out[k, m] += a[i, m] * b[j, m]


@njit(cache=True)
def _contract_kernel(a, b, bnz, pi, pj, pk, out):
    n_batch = a.shape[1]
    n_x = a.shape[2]
    n_c = a.shape[3]
    n_y = b.shape[3]
    for p in range(pi.shape[0]):
        i = pi[p]
        j = pj[p]
        k = pk[p]
        for bt in range(n_batch):
            for x in range(n_x):
                for c in range(n_c):
                    av = a[i, bt, x, c]
                    if av != 0.0 and bnz[j, bt, c]:
                        for y in range(n_y):
                            out[k, bt, x, y] += av * b[j, bt, c, y]


@njit(cache=True)
def _inverse_kernel(m, inv0, pi, pj, starts, korder, out):
    # solves M Y = I coefficient by coefficient in order of total degree
    n_batch = m.shape[1]
    d = m.shape[2]
    acc = np.zeros((d, d))
    for kk in range(korder.shape[0]):
        k = korder[kk]
        for bt in range(n_batch):
            if k == 0:
                out[0, bt] = inv0[bt]
                continue
            acc[:, :] = 0.0
            for p in range(starts[k], starts[k + 1]):
                i = pi[p]
                if i == 0:
                    continue
                j = pj[p]
                for r in range(d):
                    for c in range(d):
                        mv = m[i, bt, r, c]
                        if mv != 0.0:
                            for s in range(d):
                                acc[r, s] += mv * out[j, bt, c, s]
            for r in range(d):
                for s in range(d):
                    v = 0.0
                    for c in range(d):
                        v += inv0[bt, r, c] * acc[c, s]
                    out[k, bt, r, s] = -v


def _canonical_caps(n_vars: int, order: int, weights: tuple[int, ...], caps) -> tuple:
    merged: dict[tuple[int, ...], int] = {}
    for group, bound in caps:
        group = tuple(sorted(set(int(v) for v in group)))
        if not group or any(v < 0 or v >= n_vars for v in group):
            raise UsageError(f"invalid cap group {group} for {n_vars} variables")
        bound = int(bound)
        if bound < 0:
            raise InsufficientOrderError(f"cap on variables {group} became negative")
        merged[group] = min(bound, merged.get(group, bound))
    out = []
    for group, bound in sorted(merged.items()):
        if all(weights[v] == 1 for v in group) and bound >= order:
            continue
        out.append((group, bound))
    return tuple(out)


class JetSpace:
    """A truncation set together with its cached multiplication tables.

    Obtain instances through :meth:`JetSpace.get`; spaces are interned so
    identity comparison is equality.
    """

    def __init__(self, n_vars: int, order: int, weights: tuple[int, ...], caps: tuple):
        self.n_vars = n_vars
        self.order = order
        self.weights = weights
        self.caps = caps
        self.exponents = self._enumerate()
        self.size = self.exponents.shape[0]
        w = np.asarray(weights, dtype=np.int64)
        self.degrees = self.exponents.astype(np.int64) @ w if n_vars else np.zeros(1, np.int64)
        self.max_degree = int(self.exponents.sum(axis=1).max()) if n_vars else 0
        base = int(self.exponents.max()) + 2 if self.size and n_vars else 2
        self._base = base
        if n_vars and base ** n_vars >= 2 ** 62:
            raise UsageError("jet space too large for index keys")
        self._radix = base ** np.arange(n_vars, dtype=np.int64)
        keys = self.exponents.astype(np.int64) @ self._radix if n_vars else np.zeros(1, np.int64)
        self._sorter = np.argsort(keys, kind="stable")
        self._sorted_keys = keys[self._sorter]
        self._lock = threading.Lock()
        self._mul: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
        self._deriv: dict[int, tuple] = {}
        self._proj: dict[int, np.ndarray] = {}

    @staticmethod
    def get(n_vars: int, order: int, weights: Sequence[int] | None = None, caps: Iterable = ()) -> "JetSpace":
        n_vars = int(n_vars)
        order = int(order)
        if n_vars < 0:
            raise UsageError("n_vars must be non-negative")
        if order < 0:
            raise InsufficientOrderError(f"jet order {order} is negative")
        weights = tuple(1 for _ in range(n_vars)) if weights is None else tuple(int(w) for w in weights)
        if len(weights) != n_vars or any(w not in (0, 1) for w in weights):
            raise UsageError("weights must be 0 or 1 per variable")
        caps = _canonical_caps(n_vars, order, weights, caps)
        for v, w in enumerate(weights):
            if w == 0 and not any(v in g for g, _ in caps):
                raise UsageError(f"parameter variable {v} needs a degree cap")
        key = (n_vars, order, weights, caps)
        with _SPACE_LOCK:
            space = _SPACES.get(key)
            if space is None:
                space = JetSpace(n_vars, order, weights, caps)
                _SPACES[key] = space
            return space

    def __repr__(self) -> str:
        extra = f", caps={self.caps}" if self.caps else ""
        if any(w == 0 for w in self.weights):
            extra += f", weights={self.weights}"
        return f"JetSpace(n_vars={self.n_vars}, order={self.order}{extra})"

    def _enumerate(self) -> np.ndarray:
        n = self.n_vars
        if n == 0:
            return np.zeros((1, 0), dtype=np.int16)
        cap_groups = [(set(g), b) for g, b in self.caps]
        rows: list[tuple[int, ...]] = []

        def rec(v: int, prefix: list[int], deg: int, cap_used: list[int]) -> None:
            if v == n:
                rows.append(tuple(prefix))
                return
            limit = self.order - deg if self.weights[v] else 10 ** 6
            for ci, (g, b) in enumerate(cap_groups):
                if v in g:
                    limit = min(limit, b - cap_used[ci])
            for e in range(limit + 1):
                used = [cap_used[ci] + (e if v in g else 0) for ci, (g, _) in enumerate(cap_groups)]
                prefix.append(e)
                rec(v + 1, prefix, deg + e * self.weights[v], used)
                prefix.pop()

        rec(0, [], 0, [0] * len(cap_groups))
        exps = np.array(rows, dtype=np.int16)
        deg = exps.astype(np.int64) @ np.asarray(self.weights, dtype=np.int64)
        # graded by weighted degree, then by unweighted degree, then descending lex
        keys = [-exps[:, v] for v in range(n - 1, -1, -1)] + [exps.sum(axis=1), deg]
        order = np.lexsort(keys)
        return np.ascontiguousarray(exps[order])

    # ----- index helpers -------------------------------------------------
    def lookup(self, exps: np.ndarray) -> np.ndarray:
        """Indices of exponent rows in this space, ``-1`` where absent."""
        exps = np.asarray(exps, dtype=np.int64)
        if self.n_vars == 0:
            return np.zeros(exps.shape[0] if exps.ndim > 1 else 1, dtype=np.int64)
        exps = exps.reshape(-1, self.n_vars)
        bad = (exps < 0).any(axis=1) | (exps >= self._base).any(axis=1)
        keys = np.where(bad[:, None], 0, exps) @ self._radix
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.clip(pos, 0, self.size - 1)
        found = (self._sorted_keys[pos] == keys) & ~bad
        return np.where(found, self._sorter[pos], -1)

    def index(self, exponent: Sequence[int]) -> int:
        idx = int(self.lookup(np.asarray(exponent).reshape(1, -1))[0])
        if idx < 0:
            raise UsageError(f"multi-index {tuple(exponent)} not in {self}")
        return idx

    def contains(self, other: "JetSpace") -> bool:
        if other is self:
            return True
        return other.n_vars == self.n_vars and bool((self.lookup(other.exponents) >= 0).all())

    def mul_table(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Index triples (i, j, k) with alpha_i + alpha_j = alpha_k, sorted by k."""
        if self._mul is None:
            with self._lock:
                if self._mul is None:
                    self._mul = self._build_mul_table()
        return self._mul

    def _build_mul_table(self):
        exps = self.exponents.astype(np.int64)
        deg = self.degrees
        pis, pjs, pks = [], [], []
        # monomials are sorted by weighted degree, so partners form a prefix
        for d in np.unique(deg):
            rows = np.nonzero(deg == d)[0]
            n_partner = int(np.searchsorted(deg, self.order - d, side="right"))
            if n_partner == 0:
                continue
            sums = exps[rows][:, None, :] + exps[None, :n_partner, :]
            k = self.lookup(sums.reshape(len(rows) * n_partner, self.n_vars)).reshape(len(rows), n_partner)
            ii, jj = np.nonzero(k >= 0)
            pis.append(rows[ii])
            pjs.append(jj)
            pks.append(k[ii, jj])
        pi = np.concatenate(pis).astype(np.int64)
        pj = np.concatenate(pjs).astype(np.int64)
        pk = np.concatenate(pks).astype(np.int64)
        perm = np.lexsort((pj, pi, pk))
        return pi[perm].copy(), pj[perm].copy(), pk[perm].copy()

    def degree_schedule(self) -> tuple[np.ndarray, np.ndarray]:
        """Offsets of each output index in the multiplication table and the
        indices ordered by unweighted total degree."""
        pi, pj, pk = self.mul_table()
        starts = np.searchsorted(pk, np.arange(self.size + 1)).astype(np.int64)
        korder = np.argsort(self.exponents.sum(axis=1), kind="stable").astype(np.int64)
        return starts, korder

    def derivative_space(self, v: int) -> "JetSpace":
        caps = [(g, b - 1 if v in g else b) for g, b in self.caps]
        return JetSpace.get(self.n_vars, self.order - self.weights[v], self.weights, caps)

    def derivative_map(self, v: int):
        with self._lock:
            hit = self._deriv.get(v)
        if hit is not None:
            return hit
        if self.weights[v] and self.order == 0:
            raise InsufficientOrderError("cannot differentiate an order-0 jet")
        target = self.derivative_space(v)
        src = target.exponents.astype(np.int64).copy()
        src[:, v] += 1
        idx = self.lookup(src)
        valid = idx >= 0
        factor = (target.exponents[:, v].astype(np.float64) + 1.0) * valid
        hit = (target, np.where(valid, idx, 0), factor)
        with self._lock:
            self._deriv[v] = hit
        return hit

    def projection(self, target: "JetSpace") -> np.ndarray:
        """Indices into this space of every monomial of ``target`` (a subset)."""
        key = id(target)
        with self._lock:
            hit = self._proj.get(key)
        if hit is not None:
            return hit
        idx = self.lookup(target.exponents)
        if (idx < 0).any():
            raise UsageError(f"{target} is not contained in {self}")
        with self._lock:
            self._proj[key] = idx
        return idx

    def intersect(self, other: "JetSpace") -> "JetSpace":
        if other is self:
            return self
        if other.n_vars != self.n_vars:
            raise UsageError(f"mismatched n_vars: {self.n_vars} vs {other.n_vars}")
        if other.weights != self.weights:
            raise UsageError("mismatched variable weights")
        return JetSpace.get(self.n_vars, min(self.order, other.order), self.weights, self.caps + other.caps)


def _as_space(space_or_nvars, order=None) -> JetSpace:
    if isinstance(space_or_nvars, JetSpace):
        return space_or_nvars
    return JetSpace.get(space_or_nvars, order)


def _pad(c: np.ndarray, ndim: int) -> np.ndarray:
    extra = ndim - (c.ndim - 1)
    if extra <= 0:
        return c
    return c.reshape((c.shape[0],) + (1,) * extra + c.shape[1:])


class Jet:
    """A tensor of jets sharing one :class:`JetSpace`."""

    __slots__ = ("space", "coeffs")
    __array_priority__ = 100

    def __init__(self, space: JetSpace, coeffs):
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.ndim == 0 or coeffs.shape[0] != space.size:
            raise UsageError(f"coefficient array of shape {coeffs.shape} does not fit {space}")
        self.space = space
        self.coeffs = coeffs

    # ----- construction ---------------------------------------------------
    @classmethod
    def constant(cls, space: JetSpace, value) -> "Jet":
        value = np.asarray(value, dtype=np.float64)
        c = np.zeros((space.size,) + value.shape)
        c[0] = value
        return cls(space, c)

    @classmethod
    def zeros(cls, space: JetSpace, shape: tuple[int, ...] = ()) -> "Jet":
        return cls(space, np.zeros((space.size,) + tuple(shape)))

    @classmethod
    def variable(cls, space: JetSpace, v: int, base: float = 0.0) -> "Jet":
        """The coordinate function ``x_v`` expanded about ``base``."""
        c = np.zeros(space.size)
        c[0] = base
        e = np.zeros(space.n_vars, dtype=np.int64)
        e[v] = 1
        idx = space.lookup(e[None, :])[0]
        if idx >= 0:
            c[idx] = 1.0
        return cls(space, c)

    @classmethod
    def from_terms(cls, space: JetSpace, terms: dict) -> "Jet":
        """Scalar jet from ``{exponent tuple: coefficient}``; terms outside the space are dropped."""
        c = np.zeros(space.size)
        for exp, val in terms.items():
            idx = space.lookup(np.asarray(exp).reshape(1, -1))[0]
            if idx >= 0:
                c[idx] += val
        return cls(space, c)

    # ----- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.coeffs.shape[1:]

    @property
    def ndim(self) -> int:
        return self.coeffs.ndim - 1

    @property
    def order(self) -> int:
        return self.space.order

    @property
    def n_vars(self) -> int:
        return self.space.n_vars

    @property
    def value(self):
        """Constant term (the value at the base point)."""
        v = self.coeffs[0]
        return float(v) if v.ndim == 0 else v.copy()

    def coefficient(self, exponent: Sequence[int]):
        v = self.coeffs[self.space.index(exponent)]
        return float(v) if v.ndim == 0 else v.copy()

    def scale(self) -> float:
        return float(np.max(np.abs(self.coeffs))) if self.coeffs.size else 0.0

    def __repr__(self) -> str:
        return f"Jet({self.space}, shape={self.shape})"

    def __getitem__(self, item) -> "Jet":
        if not isinstance(item, tuple):
            item = (item,)
        return Jet(self.space, self.coeffs[(slice(None),) + item])

    def __len__(self) -> int:
        return self.shape[0]

    def reshape(self, *shape) -> "Jet":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return Jet(self.space, self.coeffs.reshape((self.space.size,) + tuple(shape)))

    def transpose(self, *axes) -> "Jet":
        if not axes:
            axes = tuple(range(self.ndim))[::-1]
        return Jet(self.space, np.transpose(self.coeffs, (0,) + tuple(a + 1 for a in axes)))

    def swapaxes(self, a: int, b: int) -> "Jet":
        a = a % self.ndim
        b = b % self.ndim
        return Jet(self.space, np.swapaxes(self.coeffs, a + 1, b + 1))

    @property
    def T(self) -> "Jet":
        return self.transpose()

    def sum(self, axis=None) -> "Jet":
        if axis is None:
            axis = tuple(range(self.ndim))
        elif isinstance(axis, int):
            axis = (axis,)
        axis = tuple(a % self.ndim + 1 for a in axis)
        return Jet(self.space, self.coeffs.sum(axis=axis))

    def trace(self, a: int = -2, b: int = -1) -> "Jet":
        a = a % self.ndim
        b = b % self.ndim
        return Jet(self.space, np.trace(self.coeffs, axis1=a + 1, axis2=b + 1))

    def to_space(self, space: JetSpace) -> "Jet":
        """Truncate to a sub-space."""
        if space is self.space:
            return self
        idx = self.space.projection(space)
        return Jet(space, self.coeffs[idx])

    def truncate(self, order: int) -> "Jet":
        s = self.space
        return self.to_space(JetSpace.get(s.n_vars, min(order, s.order), s.weights, s.caps))

    def with_caps(self, caps) -> "Jet":
        s = self.space
        return self.to_space(JetSpace.get(s.n_vars, s.order, s.weights, s.caps + tuple(caps)))

    def nilpotent(self) -> "Jet":
        c = self.coeffs.copy()
        c[0] = 0.0
        return Jet(self.space, c)

    def copy(self) -> "Jet":
        return Jet(self.space, self.coeffs.copy())

    # ----- arithmetic ------------------------------------------------------
    def _binary_operands(self, other):
        if isinstance(other, Jet):
            space = self.space.intersect(other.space)
            return space, self.to_space(space).coeffs, other.to_space(space).coeffs
        return self.space, self.coeffs, None

    def __add__(self, other):
        if isinstance(other, Jet):
            space, a, b = self._binary_operands(other)
            nd = max(a.ndim, b.ndim) - 1
            return Jet(space, _pad(a, nd) + _pad(b, nd))
        other = np.asarray(other, dtype=np.float64)
        nd = max(self.ndim, other.ndim)
        c = np.array(np.broadcast_to(_pad(self.coeffs, nd), (self.space.size,) + np.broadcast_shapes(self.shape, other.shape)))
        c[0] = c[0] + other
        return Jet(self.space, c)

    __radd__ = __add__

    def __neg__(self) -> "Jet":
        return Jet(self.space, -self.coeffs)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Jet):
            return _mul(self, other)
        other = np.asarray(other, dtype=np.float64)
        return Jet(self.space, _pad(self.coeffs, other.ndim) * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return _mul(self, reciprocal(other))
        other = np.asarray(other, dtype=np.float64)
        if np.any(other == 0):
            raise SingularInputError("division by zero constant")
        return Jet(self.space, _pad(self.coeffs, other.ndim) / other)

    def __rtruediv__(self, other):
        return reciprocal(self) * other

    def __pow__(self, power):
        if isinstance(power, (int, np.integer)):
            return _int_power(self, int(power))
        p = float(power)
        if p.is_integer():
            return _int_power(self, int(p))
        return jet_analytic("pow", self, p)

    def partial(self, v: int) -> "Jet":
        return jet_partial(self, v)

    def integrate(self, v: int) -> "Jet":
        """Antiderivative in variable ``v`` vanishing at ``x_v = 0``, truncated to the same space."""
        s = self.space
        exps = s.exponents.astype(np.int64).copy()
        has = exps[:, v] > 0
        exps[:, v] -= 1
        idx = s.lookup(exps)
        c = np.zeros_like(self.coeffs)
        rows = np.nonzero(has & (idx >= 0))[0]
        fac = 1.0 / s.exponents[rows, v].astype(np.float64)
        c[rows] = _pad(self.coeffs[idx[rows]], self.ndim) * fac.reshape((-1,) + (1,) * self.ndim)
        return Jet(s, c)

    def exp(self) -> "Jet":
        return jet_analytic("exp", self)

    def log(self) -> "Jet":
        return jet_analytic("log", self)

    def sqrt(self) -> "Jet":
        return jet_analytic("sqrt", self)

    def sin(self) -> "Jet":
        return jet_analytic("sin", self)

    def cos(self) -> "Jet":
        return jet_analytic("cos", self)

    def allclose(self, other, rtol: float = 1e-12, atol: float = 0.0) -> bool:
        d = self - other
        ref = max(self.scale(), other.scale() if isinstance(other, Jet) else float(np.max(np.abs(other))), 1e-300)
        return d.scale() <= atol + rtol * ref


def _mul(a: Jet, b: Jet) -> Jet:
    space = a.space.intersect(b.space)
    ca = a.to_space(space).coeffs
    cb = b.to_space(space).coeffs
    shape = np.broadcast_shapes(ca.shape[1:], cb.shape[1:])
    n = space.size
    ca = np.ascontiguousarray(np.broadcast_to(_pad(ca, len(shape)), (n,) + shape)).reshape(n, -1)
    cb = np.ascontiguousarray(np.broadcast_to(_pad(cb, len(shape)), (n,) + shape)).reshape(n, -1)
    out = np.zeros_like(ca)
    pi, pj, pk = space.mul_table()
    _mul_kernel(ca, cb, pi, pj, pk, out)
    return Jet(space, out.reshape((n,) + shape))


def _int_power(a: Jet, p: int) -> Jet:
    if p < 0:
        return _int_power(reciprocal(a), -p)
    result = None
    base = a
    while p:
        if p & 1:
            result = base if result is None else result * base
        p >>= 1
        if p:
            base = base * base
    if result is None:
        return Jet.constant(a.space, np.ones(a.shape))
    return result


def _compose(a: Jet, coefficients: Callable[[np.ndarray, int], np.ndarray]) -> Jet:
    """Evaluate ``sum_m c_m(a0) h^m`` with ``h`` the nilpotent part of ``a``."""
    a0 = a.coeffs[0]
    h = a.nilpotent()
    top = a.space.max_degree
    result = Jet.constant(a.space, coefficients(a0, top))
    for m in range(top - 1, -1, -1):
        result = result * h + coefficients(a0, m)
    return result


def reciprocal(a: Jet) -> Jet:
    a0 = a.coeffs[0]
    if np.any(a0 == 0) or not np.all(np.isfinite(a0)):
        raise SingularInputError("division by a jet with zero constant term")
    return _compose(a, lambda x, m: (-1.0) ** m / x ** (m + 1))


def _binom(r: float, m: int) -> float:
    out = 1.0
    for i in range(m):
        out *= (r - i) / (i + 1)
    return out


def jet_analytic(f: str, a: Jet, r: float | None = None) -> Jet:
    """Apply ``f`` in {exp, log, sqrt, sin, cos, pow} by univariate Taylor composition."""
    a0 = a.coeffs[0]
    if f == "exp":
        return _compose(a, lambda x, m: np.exp(x) / math.factorial(m))
    if f == "sin":
        return _compose(a, lambda x, m: np.sin(x + m * math.pi / 2) / math.factorial(m))
    if f == "cos":
        return _compose(a, lambda x, m: np.cos(x + m * math.pi / 2) / math.factorial(m))
    if f == "log":
        if np.any(a0 <= 0):
            raise SingularInputError("log of a jet with non-positive constant term")
        return _compose(a, lambda x, m: np.log(x) if m == 0 else (-1.0) ** (m + 1) / (m * x ** m))
    if f in ("sqrt", "pow"):
        p = 0.5 if f == "sqrt" else float(r)
        if f == "pow" and p.is_integer():
            return _int_power(a, int(p))
        if np.any(a0 <= 0):
            raise SingularInputError(f"{f} of a jet with non-positive constant term")
        return _compose(a, lambda x, m: _binom(p, m) * x ** (p - m))
    raise UsageError(f"unknown analytic function {f!r}")


def jet_arith(a: Jet, b: Jet, op: str) -> Jet:
    if isinstance(a, Jet) and isinstance(b, Jet) and a.n_vars != b.n_vars:
        raise UsageError(f"mismatched n_vars: {a.n_vars} vs {b.n_vars}")
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        return a / b
    raise UsageError(f"unknown operation {op!r}")


def jet_partial(a: Jet, i: int) -> Jet:
    if not 0 <= i < a.n_vars:
        raise UsageError(f"variable index {i} out of range")
    target, idx, factor = a.space.derivative_map(i)
    return Jet(target, a.coeffs[idx] * factor.reshape((-1,) + (1,) * a.ndim))


def gradient(a: Jet, variables: Sequence[int]) -> Jet:
    """Stack of partials along a new trailing axis."""
    return stack([jet_partial(a, v) for v in variables], axis=-1)


def stack(jets: Sequence[Jet], axis: int = 0) -> Jet:
    space = jets[0].space
    for j in jets[1:]:
        space = space.intersect(j.space)
    arrays = [j.to_space(space).coeffs for j in jets]
    nd = arrays[0].ndim
    ax = axis + 1 if axis >= 0 else nd + 1 + axis
    return Jet(space, np.stack(arrays, axis=ax))


def remap(a: Jet, target: JetSpace, var_map: dict[int, int], fixed: dict[int, int] | None = None) -> Jet:
    """Move coefficients into another space.

    Source variable ``v`` becomes target variable ``var_map[v]``; source
    variables in ``fixed`` are sliced at the given exponent.  Terms that do
    not fit the target are dropped, missing ones are zero.
    """
    fixed = fixed or {}
    src = a.space.exponents.astype(np.int64)
    keep = np.ones(src.shape[0], dtype=bool)
    for v, e in fixed.items():
        keep &= src[:, v] == e
    for v in range(a.n_vars):
        if v not in var_map and v not in fixed:
            keep &= src[:, v] == 0
    rows = np.nonzero(keep)[0]
    dest = np.zeros((rows.size, target.n_vars), dtype=np.int64)
    for v, t in var_map.items():
        dest[:, t] += src[rows, v]
    idx = target.lookup(dest)
    ok = idx >= 0
    c = np.zeros((target.size,) + a.shape)
    c[idx[ok]] = a.coeffs[rows[ok]]
    return Jet(target, c)


# ----- einsum -----------------------------------------------------------------

_LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXY"  # "Z" labels the coefficient axis


def _expand_ellipsis(subs: str, ndims: Sequence[int]) -> tuple[list[str], str]:
    if "->" not in subs:
        raise UsageError("einsum subscripts need an explicit output")
    lhs, out = subs.replace(" ", "").split("->")
    terms = lhs.split(",")
    if len(terms) != len(ndims):
        raise UsageError("einsum operand count mismatch")
    n_ell = 0
    for t, nd in zip(terms, ndims):
        if "..." in t:
            n_ell = max(n_ell, nd - len(t.replace("...", "")))
    ell = _LETTERS[:n_ell]
    expanded = []
    for t, nd in zip(terms, ndims):
        if "..." in t:
            k = nd - len(t.replace("...", ""))
            t = t.replace("...", ell[n_ell - k:])
        if len(t) != nd:
            raise UsageError(f"einsum term {t!r} does not match operand of rank {nd}")
        expanded.append(t)
    out = out.replace("...", ell)
    return expanded, out


def _linear_einsum(term: str, out: str, c: np.ndarray) -> np.ndarray:
    return np.einsum(f"Z{term}->Z{out}", c)


def _pair(la: str, a: Jet, lb: str, b: Jet, lo: str) -> Jet:
    # reduce labels private to one operand and absent from the output
    ra = "".join(dict.fromkeys(l for l in la if l in lb or l in lo))
    rb = "".join(dict.fromkeys(l for l in lb if l in la or l in lo))
    space = a.space.intersect(b.space)
    ca = a.to_space(space).coeffs
    cb = b.to_space(space).coeffs
    if ra != la:
        ca = _linear_einsum(la, ra, ca)
    if rb != lb:
        cb = _linear_einsum(lb, rb, cb)
    batch = [l for l in ra if l in rb and l in lo]
    contr = [l for l in ra if l in rb and l not in lo]
    fa = [l for l in ra if l not in rb]
    fb = [l for l in rb if l not in ra]
    size = {}
    for labels, arr in ((ra, ca), (rb, cb)):
        for l, s in zip(labels, arr.shape[1:]):
            if size.get(l, 1) == 1:
                size[l] = s
            elif s not in (1, size[l]):
                raise UsageError(f"einsum size mismatch for label {l!r}")
    n = space.size

    def arrange(arr, labels, groups):
        order = [labels.index(l) + 1 for g in groups for l in g]
        arr = np.transpose(arr, [0] + order)
        full = (n,) + tuple(size[l] for g in groups for l in g)
        arr = np.broadcast_to(arr, full)
        shape4 = (n,) + tuple(int(np.prod([size[l] for l in g], dtype=np.int64)) for g in groups)
        return np.ascontiguousarray(arr).reshape(shape4)

    A = arrange(ca, ra, [batch, fa, contr])
    B = arrange(cb, rb, [batch, contr, fb])
    bnz = np.any(B != 0.0, axis=3)
    out = np.zeros((n, A.shape[1], A.shape[2], B.shape[3]))
    pi, pj, pk = space.mul_table()
    _contract_kernel(A, B, bnz, pi, pj, pk, out)
    res_labels = batch + fa + fb
    out = out.reshape((n,) + tuple(size[l] for l in res_labels))
    perm = [0] + [res_labels.index(l) + 1 for l in lo]
    return Jet(space, np.ascontiguousarray(np.transpose(out, perm)))


def einsum(subscripts: str, *operands) -> Jet:
    """Einstein summation over jet tensors and constant arrays.

    Products between two jets use the truncated Cauchy product; constant
    numpy operands enter linearly.  Ellipsis is supported for leading batch
    axes.
    """
    ndims = [op.ndim if isinstance(op, Jet) else np.ndim(op) for op in operands]
    terms, out = _expand_ellipsis(subscripts, ndims)
    jets = [(t, op) for t, op in zip(terms, operands) if isinstance(op, Jet)]
    consts = [(t, np.asarray(op, dtype=np.float64)) for t, op in zip(terms, operands) if not isinstance(op, Jet)]
    if not jets:
        raise UsageError("einsum needs at least one jet operand")
    # fold constant operands into the first jet operand
    t0, j0 = jets[0]
    if consts:
        later = "".join(t for t, _ in jets[1:]) + out
        keep = "".join(dict.fromkeys(l for l in t0 + "".join(t for t, _ in consts) if l in later))
        spec = ",".join(["Z" + t0] + [t for t, _ in consts]) + "->Z" + keep
        j0 = Jet(j0.space, np.einsum(spec, j0.coeffs, *[c for _, c in consts]))
        t0 = keep
    current_t, current = t0, j0
    rest = jets[1:]
    for idx, (t, op) in enumerate(rest):
        later = "".join(tt for tt, _ in rest[idx + 1:]) + out
        keep = "".join(dict.fromkeys(l for l in current_t + t if l in later))
        current = _pair(current_t, current, t, op, keep)
        current_t = keep
    if current_t != out:
        current = Jet(current.space, _linear_einsum(current_t, out, current.coeffs))
    return current


# ----- matrices ---------------------------------------------------------------


@dataclass(frozen=True)
class JetMatrix:
    """A square matrix of jets, possibly with leading batch axes."""

    entries: Jet
    symmetric: bool = False

    def __post_init__(self):
        s = self.entries.shape
        if len(s) < 2 or s[-1] != s[-2]:
            raise UsageError(f"JetMatrix needs square trailing axes, got shape {s}")
        if self.symmetric:
            c = self.entries.coeffs
            if not np.array_equal(c, np.swapaxes(c, -1, -2)):
                raise UsageError("symmetric flag set but entries are not coefficient-identical")

    @property
    def dim(self) -> int:
        return self.entries.shape[-1]

    @classmethod
    def symmetrized(cls, entries: Jet) -> "JetMatrix":
        c = entries.coeffs
        return cls(Jet(entries.space, 0.5 * (c + np.swapaxes(c, -1, -2))), True)

    def inverse(self) -> "JetMatrix":
        return jet_matrix_inverse(self)


def jet_matrix_inverse(m: JetMatrix | Jet, condition_limit: float = CONDITION_LIMIT) -> JetMatrix:
    """Inverse solving ``M Y = I`` one coefficient at a time.

    Coefficients are produced in order of total degree, so every product on
    the right of ``Y_k = -M0^{-1} sum_{i != 0} M_i Y_{k - i}`` is already known;
    the cost is that of a single matrix product.
    """
    if isinstance(m, Jet):
        m = JetMatrix(m, symmetric=bool(np.array_equal(m.coeffs, np.swapaxes(m.coeffs, -1, -2))))
    a = m.entries
    m0 = a.coeffs[0]
    cond = float(np.max(np.linalg.cond(m0))) if m0.size else 1.0
    if not np.isfinite(cond) or cond > condition_limit:
        raise SingularInputError(f"constant-term matrix is singular or ill-conditioned (condition {cond:.3e})", cond)
    inv0 = np.linalg.inv(m0)
    space = a.space
    d = m.dim
    batch = a.shape[:-2]
    mc = np.ascontiguousarray(a.coeffs).reshape((space.size, -1, d, d))
    out = np.zeros_like(mc)
    pi, pj, _ = space.mul_table()
    starts, korder = space.degree_schedule()
    _inverse_kernel(mc, np.ascontiguousarray(inv0).reshape(-1, d, d), pi, pj, starts, korder, out)
    inv = Jet(space, out.reshape((space.size,) + batch + (d, d)))
    if m.symmetric:
        return JetMatrix.symmetrized(inv)
    return JetMatrix(inv, False)
