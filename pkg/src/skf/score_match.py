"""Score-matching normal equations for polynomial exponential families.

For densities p(x) ~ exp(-lambda . phi(x)) with monomial sufficient
statistics phi up to degree r, minimizing the Fisher divergence against a
density known only through its moments reduces to the linear system
A lambda = b with

    A_{ab} = sum_i a_i b_i m_{a+b-2e_i}
    b_a    = sum_i a_i (a_i - 1) m_{a-2e_i}

over the non-constant basis entries (the constant coefficient is fixed to
zero; it is absorbed by the partition function). A needs moments only up
to degree 2r - 2 and is PSD whenever the moments come from a genuine
density with full-dimensional support.
"""

import warnings
from math import comb

import numpy as np
import scipy.linalg as sla

from .errors import IllConditioned, MissingMoment, SingularGram
from .polybasis import MomentVector, enumerate_basis, mi_degree, mi_sub

DEFAULT_CONDITION_CAP = 1e10
DEFAULT_SCALE_FACTOR = 3.5


class ScoreParams:
    """Natural parameter lambda over a degree-r basis; lambda_0 is always 0.

    `values` is aligned with the full basis (constant entry first, kept at 0)
    so that basis positions are shared with every other structure.
    """

    def __init__(self, basis, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (len(basis),):
            raise ValueError(f"expected {len(basis)} values, got {values.shape}")
        if values[0] != 0.0:
            raise ValueError("constant coefficient lambda_0 must be 0")
        if not np.all(np.isfinite(values)):
            raise ValueError("lambda entries must be finite")
        self.basis = basis
        self.values = values

    @classmethod
    def from_dict(cls, basis, table):
        vals = np.zeros(len(basis))
        for a, c in table.items():
            vals[basis.index(a)] = c
        return cls(basis, vals)

    @property
    def n(self):
        return self.basis.n

    @property
    def r(self):
        return self.basis.max_degree

    def get(self, alpha, default=0.0):
        k = self.basis._index.get(alpha)
        return default if k is None else self.values[k]

    def as_dict(self):
        return {a: v for a, v in zip(self.basis.entries, self.values) if v != 0.0}

    def nonconstant(self):
        return self.values[1:]

    def energy_polynomial(self):
        """lambda . phi as a Polynomial (density ~ exp(-energy))."""
        from .sde_model import Polynomial

        return Polynomial(self.n, dict(zip(self.basis.entries, self.values)))

    def score_polynomials(self):
        """Score components s_i = d/dx_i log p = -(d/dx_i)(lambda . phi)."""
        e = self.energy_polynomial()
        return [e.diff(i) * (-1.0) for i in range(self.n)]

    def copy(self):
        return ScoreParams(self.basis, self.values.copy())

    def __repr__(self):
        return f"ScoreParams(n={self.n}, r={self.r})"


class GramSystem:
    """A, b of the score-matching normal equations over non-constant entries."""

    def __init__(self, basis, A, b):
        self.basis = basis  # degree-r basis; row/col k of A is entry k+1
        self.A = A
        self.b = b
        self.K_used = 2 * basis.max_degree - 2

    @property
    def r(self):
        return self.basis.max_degree


def assemble_gram(moments, r):
    """Build the Gram system from moments of degree <= 2r - 2."""
    if moments.max_degree < 2 * r - 2:
        raise MissingMoment(f"need moments to degree {2 * r - 2}, have {moments.max_degree}")
    n = moments.n
    basis = enumerate_basis(n, r)
    entries = basis.entries[1:]  # non-constant
    m = len(entries)
    A = np.zeros((m, m))
    b = np.zeros(m)
    for p, a in enumerate(entries):
        for q in range(p, m):
            c = entries[q]
            acc = 0.0
            for i in range(n):
                if a[i] and c[i]:
                    idx = list(a)
                    for j in range(n):
                        idx[j] += c[j]
                    idx[i] -= 2
                    acc += a[i] * c[i] * moments.get(tuple(idx))
            A[p, q] = A[q, p] = acc
        acc = 0.0
        for i in range(n):
            if a[i] >= 2:
                idx = list(a)
                idx[i] -= 2
                acc += a[i] * (a[i] - 1) * moments.get(tuple(idx))
        b[p] = acc
    return GramSystem(basis, A, b)


def condition_estimate(A):
    """2-norm condition number; +inf for a singular matrix."""
    try:
        c = np.linalg.cond(A, 2)
    except np.linalg.LinAlgError:
        return np.inf
    return float(c) if np.isfinite(c) else np.inf


def fit_score(system, cond_cap=DEFAULT_CONDITION_CAP, ridge=0.0):
    """Solve A lambda = b. SPD factorization first, pivoted symmetric solve
    as fallback; SingularGram if the matrix is numerically rank deficient.

    ridge > 0 adds an off-model Tikhonov term (default off)."""
    A = system.A
    b = system.b
    if ridge:
        A = A + ridge * np.eye(A.shape[0])
    kappa = condition_estimate(A)
    if not np.isfinite(kappa) or kappa > 1.0 / np.finfo(float).eps:
        raise SingularGram(f"Gram matrix numerically singular (cond={kappa:.3g})")
    if kappa > cond_cap:
        warnings.warn(
            f"Gram condition estimate {kappa:.3g} exceeds cap {cond_cap:.3g}",
            IllConditioned,
            stacklevel=2,
        )
    try:
        cf = sla.cho_factor(A, check_finite=False)
        x = sla.cho_solve(cf, b, check_finite=False)
    except np.linalg.LinAlgError:
        try:
            x = sla.solve(A, b, assume_a="sym", check_finite=False)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded by cond check
            raise SingularGram(str(exc)) from exc
    values = np.concatenate(([0.0], x))
    return ScoreParams(system.basis, values)


def sm_objective(lam, system):
    """J(lambda) = (1/2) lambda^T A lambda - b^T lambda (constant dropped)."""
    if lam.basis != system.basis:
        raise ValueError("lambda and Gram system bases differ")
    x = lam.nonconstant()
    return 0.5 * x @ system.A @ x - system.b @ x


def sm_gradient(lam, system):
    """Analytic gradient A lambda - b over non-constant entries."""
    x = lam.nonconstant()
    return system.A @ x - system.b


def center_moments(raw, mu):
    """Shifted moments m^z_a = E[(x - mu)^a] via the multinomial expansion.

    m^z_a = sum_{b <= a} C(a, b) (-mu)^(a-b) m_b.
    """
    mu = np.asarray(mu, dtype=float)
    basis = raw.basis
    n = basis.n
    vals = np.empty(len(basis))
    from itertools import product as iproduct

    for k, a in enumerate(basis.entries):
        acc = 0.0
        for b in iproduct(*(range(ai + 1) for ai in a)):
            coeff = 1.0
            for i in range(n):
                coeff *= comb(a[i], b[i]) * (-mu[i]) ** (a[i] - b[i])
            if coeff != 0.0:
                acc += coeff * raw.values[basis.index(b)]
        vals[k] = acc
    vals[0] = 1.0
    return MomentVector(basis, vals)


def uncenter_moments(centered, mu):
    """Exact inverse of center_moments: replace (-mu) with (+mu)."""
    return center_moments(centered, -np.asarray(mu, dtype=float))


def scale_moments(m, s):
    """m^w_a = m_a / prod_i s_i^{a_i}; s > 0 componentwise."""
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise ValueError("scale entries must be positive")
    vals = m.values.copy()
    for k, a in enumerate(m.basis.entries):
        f = 1.0
        for i, ai in enumerate(a):
            if ai:
                f *= s[i] ** ai
        vals[k] /= f
    return MomentVector(m.basis, vals)


def unscale_moments(m, s):
    return scale_moments(m, 1.0 / np.asarray(s, dtype=float))


def rescale_score(lam, s):
    """Map lambda to the w = z / s coordinates: lambda^w_a = lambda^z_a * s^a.

    The represented density is unchanged: lambda^z . phi(z) =
    lambda^w . phi(w) for z = s * w."""
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise ValueError("scale entries must be positive")
    vals = lam.values.copy()
    for k, a in enumerate(lam.basis.entries):
        f = 1.0
        for i, ai in enumerate(a):
            if ai:
                f *= s[i] ** ai
        vals[k] *= f
    return ScoreParams(lam.basis, vals)


def unrescale_score(lam, s):
    return rescale_score(lam, 1.0 / np.asarray(s, dtype=float))


class CenteringTransform:
    """Anchor mu and per-coordinate scale s for the working coordinates
    w = (x - mu) / s. Default scale is 3.5 standard deviations."""

    def __init__(self, mu, scale):
        self.mu = np.asarray(mu, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        if np.any(self.scale <= 0):
            raise ValueError("scale entries must be positive")

    @classmethod
    def from_moments(cls, raw, c=DEFAULT_SCALE_FACTOR, min_scale=1e-8):
        mu = raw.mean()
        var = np.maximum(np.diag(raw.covariance()), 0.0)
        scale = np.maximum(c * np.sqrt(var), min_scale)
        return cls(mu, scale)

    def to_working(self, raw):
        return scale_moments(center_moments(raw, self.mu), self.scale)

    def from_working(self, w_moments):
        return uncenter_moments(unscale_moments(w_moments, self.scale), self.mu)

    def __repr__(self):
        return f"CenteringTransform(mu={self.mu}, scale={self.scale})"
