"""Polynomial SDE models, the infinitesimal generator, and the moment ODE.

An SDE dx = X(x) dt + h(x) dW with polynomial drift and diffusion has
generator  A f = grad(f) . X + Tr(H hess(f)),  H = (1/2) h h^T.
Applying it to monomial test functions x^alpha and taking expectations
gives a linear ODE system for the moments (Dynkin's formula); sources of
degree above the tracked cutoff K are the "unclosed targets" resolved by
the Stein closure.
"""

from itertools import product as _iproduct
from math import comb

import numpy as np
import scipy.sparse as sp

from .polybasis import enumerate_basis, mi_degree


class Polynomial:
    """Sparse multivariate polynomial: map multi-index -> coefficient.

    Zero coefficients are never stored; the zero polynomial has degree 0.
    """

    __slots__ = ("n", "terms")

    def __init__(self, n, terms=None):
        self.n = n
        self.terms = {}
        if terms:
            for a, c in terms.items():
                if len(a) != n:
                    raise ValueError(f"multi-index {a} has wrong length for n={n}")
                if c != 0.0:
                    self.terms[tuple(a)] = float(c)

    @classmethod
    def zero(cls, n):
        return cls(n)

    @classmethod
    def constant(cls, n, c):
        return cls(n, {(0,) * n: c})

    @classmethod
    def monomial(cls, n, alpha, c=1.0):
        return cls(n, {tuple(alpha): c})

    @classmethod
    def coordinate(cls, n, i, c=1.0):
        alpha = tuple(1 if j == i else 0 for j in range(n))
        return cls(n, {alpha: c})

    @property
    def degree(self):
        if not self.terms:
            return 0
        return max(mi_degree(a) for a in self.terms)

    def is_constant(self):
        return all(mi_degree(a) == 0 for a in self.terms)

    def constant_value(self):
        return self.terms.get((0,) * self.n, 0.0)

    def _add_term(self, alpha, c):
        cur = self.terms.get(alpha, 0.0) + c
        if cur == 0.0:
            self.terms.pop(alpha, None)
        else:
            self.terms[alpha] = cur

    def __add__(self, other):
        if not isinstance(other, Polynomial):
            other = Polynomial.constant(self.n, other)
        out = Polynomial(self.n, dict(self.terms))
        for a, c in other.terms.items():
            out._add_term(a, c)
        return out

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        return Polynomial(self.n, {a: -c for a, c in self.terms.items()})

    def __sub__(self, other):
        if not isinstance(other, Polynomial):
            other = Polynomial.constant(self.n, other)
        return self + (-other)

    def __mul__(self, other):
        if not isinstance(other, Polynomial):
            c = float(other)
            if c == 0.0:
                return Polynomial.zero(self.n)
            return Polynomial(self.n, {a: v * c for a, v in self.terms.items()})
        out = Polynomial(self.n)
        for a, ca in self.terms.items():
            for b, cb in other.terms.items():
                out._add_term(tuple(x + y for x, y in zip(a, b)), ca * cb)
        return out

    def __rmul__(self, other):
        return self.__mul__(other)

    def diff(self, i):
        """Partial derivative with respect to coordinate i."""
        out = Polynomial(self.n)
        for a, c in self.terms.items():
            if a[i] > 0:
                da = list(a)
                da[i] -= 1
                out._add_term(tuple(da), c * a[i])
        return out

    def affine_substitute(self, shift, scale=None):
        """Substitute x_i = shift_i + scale_i * y_i; returns polynomial in y."""
        shift = np.asarray(shift, dtype=float)
        scale = np.ones(self.n) if scale is None else np.asarray(scale, dtype=float)
        out = Polynomial(self.n)
        for a, c in self.terms.items():
            # (shift_i + scale_i y_i)^{a_i} expanded per coordinate
            for k in _iproduct(*(range(ai + 1) for ai in a)):
                coeff = c
                for i, (ai, ki) in enumerate(zip(a, k)):
                    coeff *= comb(ai, ki) * shift[i] ** (ai - ki) * scale[i] ** ki
                if coeff != 0.0:
                    out._add_term(tuple(k), coeff)
        return out

    def expectation(self, moments):
        """Replace each monomial with its moment. `moments` is a MomentVector
        or a mapping from multi-index to value."""
        get = moments.get if hasattr(moments, "get") else moments.__getitem__
        total = 0.0
        for a, c in self.terms.items():
            total += c * get(a)
        return total

    def __call__(self, x):
        """Evaluate at a point (1-D array) or batch ((N, n) array)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            total = 0.0
            for a, c in self.terms.items():
                v = c
                for xi, ai in zip(x, a):
                    if ai:
                        v *= xi**ai
                total += v
            return total
        total = np.zeros(x.shape[0])
        for a, c in self.terms.items():
            v = np.full(x.shape[0], c)
            for i, ai in enumerate(a):
                if ai == 1:
                    v = v * x[:, i]
                elif ai:
                    v = v * x[:, i] ** ai
            total += v
        return total

    def __eq__(self, other):
        return isinstance(other, Polynomial) and self.n == other.n and self.terms == other.terms

    def allclose(self, other, tol=1e-12):
        keys = set(self.terms) | set(other.terms)
        return all(abs(self.terms.get(k, 0.0) - other.terms.get(k, 0.0)) <= tol for k in keys)

    def __repr__(self):
        if not self.terms:
            return "Polynomial(0)"
        parts = [f"{c:+g}*x^{a}" for a, c in sorted(self.terms.items())]
        return "Polynomial(" + " ".join(parts) + ")"


class PolynomialSDE:
    """dx = X(x) dt + h(x) dW with polynomial drift X (n entries) and
    diffusion h (n x n_w entries). The diffusion tensor H = (1/2) h h^T
    is derived once at construction."""

    def __init__(self, drift, diffusion):
        self.n = len(drift)
        self.drift = list(drift)
        self.diffusion = [list(row) for row in diffusion]
        if len(self.diffusion) != self.n:
            raise ValueError("diffusion must have n rows")
        self.n_w = len(self.diffusion[0]) if self.diffusion else 0
        for row in self.diffusion:
            if len(row) != self.n_w:
                raise ValueError("ragged diffusion matrix")
        # H_ij = (1/2) sum_k h_ik h_jk, symmetric by construction
        H = [[Polynomial.zero(self.n) for _ in range(self.n)] for _ in range(self.n)]
        for i in range(self.n):
            for j in range(i, self.n):
                acc = Polynomial.zero(self.n)
                for k in range(self.n_w):
                    acc = acc + self.diffusion[i][k] * self.diffusion[j][k]
                acc = acc * 0.5
                H[i][j] = acc
                H[j][i] = acc
        self.H = H

    @property
    def drift_degree(self):
        return max((p.degree for p in self.drift), default=0)

    @property
    def diffusion_degree(self):
        return max((p.degree for row in self.diffusion for p in row), default=0)

    def is_constant_diffusion(self):
        return all(p.is_constant() for row in self.diffusion for p in row)

    def diffusion_matrix(self, x=None):
        """Numeric h at a point; without x requires constant diffusion."""
        if x is None:
            if not self.is_constant_diffusion():
                raise ValueError("diffusion is state dependent; supply x")
            return np.array(
                [[p.constant_value() for p in row] for row in self.diffusion]
            )
        return np.array([[p(x) for p in row] for row in self.diffusion])

    def drift_at(self, x):
        """Drift evaluated at a point (n,) or batch (N, n) -> same leading shape."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return np.array([p(x) for p in self.drift])
        return np.stack([p(x) for p in self.drift], axis=1)

    def drift_jacobian(self):
        """Matrix of polynomials dX_i/dx_j (used by linearization baselines)."""
        return [[self.drift[i].diff(j) for j in range(self.n)] for i in range(self.n)]


def excess_degree(sde):
    """max(d_X - 1, 2 d_h - 2), clamped to >= 0 for reporting.

    This is the number of degrees the moment ODE reaches above the tracked
    cutoff, hence the number of closure layers needed.
    """
    raw = max(sde.drift_degree - 1, 2 * sde.diffusion_degree - 2)
    return max(raw, 0)


def apply_generator(sde, alpha):
    """A phi_alpha = grad(phi).X + Tr(H hess(phi)) for phi_alpha = x^alpha."""
    n = sde.n
    if len(alpha) != n:
        raise ValueError("alpha length must equal state dimension")
    out = Polynomial.zero(n)
    for i in range(n):
        ai = alpha[i]
        if ai == 0:
            continue
        da = list(alpha)
        da[i] -= 1
        out = out + sde.drift[i] * Polynomial.monomial(n, tuple(da), ai)
    for i in range(n):
        for j in range(n):
            Hij = sde.H[i][j]
            if not Hij.terms:
                continue
            if i == j:
                if alpha[i] < 2:
                    continue
                dd = list(alpha)
                dd[i] -= 2
                coeff = alpha[i] * (alpha[i] - 1)
            else:
                if alpha[i] < 1 or alpha[j] < 1:
                    continue
                dd = list(alpha)
                dd[i] -= 1
                dd[j] -= 1
                coeff = alpha[i] * alpha[j]
            out = out + Hij * Polynomial.monomial(n, tuple(dd), coeff)
    return out


class MomentOdeOperator:
    """Precompiled right-hand side of the moment ODE dm/dt at degrees <= K.

    Evaluation is dm = T_tracked @ m + T_unclosed @ u, where u holds values
    for the unclosed targets (degree K+1 .. K+d_bar) in the order of
    `unclosed_targets`. Built once per (SDE, K); numeric per substep.
    """

    def __init__(self, sde, K):
        self.sde = sde
        self.K = K
        basis = enumerate_basis(sde.n, K)
        self.basis = basis
        M = len(basis)
        rows_t, cols_t, vals_t = [], [], []
        rows_u, cols_u, vals_u = [], [], []
        target_index = {}
        targets = []
        for k, alpha in enumerate(basis.entries):
            if mi_degree(alpha) == 0:
                continue  # m_0 is constant
            gen = apply_generator(sde, alpha)
            for gamma, c in gen.terms.items():
                if gamma in basis:
                    rows_t.append(k)
                    cols_t.append(basis.index(gamma))
                    vals_t.append(c)
                else:
                    j = target_index.get(gamma)
                    if j is None:
                        j = len(targets)
                        target_index[gamma] = j
                        targets.append(gamma)
                    rows_u.append(k)
                    cols_u.append(j)
                    vals_u.append(c)
        order = sorted(range(len(targets)), key=lambda j: (mi_degree(targets[j]), targets[j]))
        remap = {old: new for new, old in enumerate(order)}
        self.unclosed_targets = [targets[j] for j in order]
        self.T_tracked = sp.csr_matrix((vals_t, (rows_t, cols_t)), shape=(M, M))
        cols_u = [remap[j] for j in cols_u]
        self.T_unclosed = sp.csr_matrix(
            (vals_u, (rows_u, cols_u)), shape=(M, len(self.unclosed_targets))
        )
        d_bar = excess_degree(sde)
        assert all(mi_degree(g) <= K + d_bar for g in self.unclosed_targets)

    def apply(self, values, closure_values=None):
        """dm/dt for a value array aligned with the tracked basis.

        closure_values: array aligned with unclosed_targets (or None if empty).
        """
        dm = self.T_tracked @ values
        if self.unclosed_targets:
            if closure_values is None:
                raise ValueError("closure values required for unclosed targets")
            dm = dm + self.T_unclosed @ np.asarray(closure_values, dtype=float)
        return dm


def build_moment_operator(sde, K):
    if K < 1:
        raise ValueError("K must be >= 1")
    return MomentOdeOperator(sde, K)


def mean_drift(sde, moments):
    """E[X(x)] with each drift monomial replaced by its moment."""
    return np.array([p.expectation(moments) for p in sde.drift])


def shift_sde(sde, mu):
    """Exact coordinate change z = x - mu: drift X(z + mu), diffusion h(z + mu)."""
    mu = np.asarray(mu, dtype=float)
    drift = [p.affine_substitute(mu) for p in sde.drift]
    diffusion = [[p.affine_substitute(mu) for p in row] for row in sde.diffusion]
    return PolynomialSDE(drift, diffusion)


def transform_sde(sde, mu, scale):
    """Coordinate change w = (x - mu) / scale (componentwise).

    drift_w_i(w) = X_i(mu + scale*w) / scale_i, and the diffusion row i is
    divided by scale_i, so the w-process solves the transformed SDE exactly.
    """
    mu = np.asarray(mu, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if np.any(scale <= 0):
        raise ValueError("scale entries must be positive")
    drift = [
        sde.drift[i].affine_substitute(mu, scale) * (1.0 / scale[i]) for i in range(sde.n)
    ]
    diffusion = [
        [p.affine_substitute(mu, scale) * (1.0 / scale[i]) for p in sde.diffusion[i]]
        for i in range(sde.n)
    ]
    return PolynomialSDE(drift, diffusion)


def center_sde(sde, mu, centered_moments):
    """SDE in z = x - mu with the drift expectation subtracted.

    The subtracted constant is E[X] evaluated with the supplied centered
    moments, so the returned drift has zero expectation at the centering
    instant (e.g. the Lotka-Volterra centered drift keeps the fluctuation
    z_1 z_2 - m^z_(1,1)). Diffusion is shifted but otherwise unchanged.
    """
    shifted = shift_sde(sde, mu)
    const = mean_drift(shifted, centered_moments)
    drift = [shifted.drift[i] - float(const[i]) for i in range(sde.n)]
    return PolynomialSDE(drift, shifted.diffusion)
