"""Multi-index arithmetic, graded basis enumeration, and moment storage.

Multi-indices are plain tuples of non-negative ints. Bases enumerate all
multi-indices of degree <= r in graded lexicographic order (degree first,
then tuple comparison), which keeps every degree block contiguous so that
degree truncation is a slice.
"""

from math import comb

import numpy as np

from .errors import MissingMoment

# counts are kept in 64-bit range; beyond this a configuration is infeasible
_COUNT_LIMIT = 2**63 - 1


def mi_degree(a):
    return sum(a)


def mi_add(a, b):
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    return tuple(x + y for x, y in zip(a, b))


def mi_sub(a, b):
    """Componentwise a - b, or None if any entry would go negative.

    Callers treat a None-indexed moment as zero.
    """
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    out = tuple(x - y for x, y in zip(a, b))
    if any(e < 0 for e in out):
        return None
    return out


def count_basis(n, r):
    c = comb(n + r, n)
    if c > _COUNT_LIMIT:
        raise OverflowError(f"basis size C({n + r},{n}) exceeds 64-bit range")
    return c


def count_exact_degree(n, d):
    c = comb(d + n - 1, n - 1)
    if c > _COUNT_LIMIT:
        raise OverflowError(f"degree-slice size C({d + n - 1},{n - 1}) exceeds 64-bit range")
    return c


def enumerate_exact_degree(n, d):
    """All multi-indices of degree exactly d in lexicographic order."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if d < 0:
        raise ValueError("d must be >= 0")
    if n == 1:
        return [(d,)]
    out = []
    for first in range(d + 1):
        for rest in enumerate_exact_degree(n - 1, d - first):
            out.append((first,) + rest)
    return out


class DegreeBasis:
    """All multi-indices of degree <= max_degree in graded lex order."""

    def __init__(self, n, max_degree):
        if n < 1:
            raise ValueError("n must be >= 1")
        if max_degree < 0:
            raise ValueError("max_degree must be >= 0")
        self.n = n
        self.max_degree = max_degree
        entries = []
        self._degree_start = []
        for d in range(max_degree + 1):
            self._degree_start.append(len(entries))
            entries.extend(enumerate_exact_degree(n, d))
        self._degree_start.append(len(entries))
        self.entries = entries
        self._index = {a: k for k, a in enumerate(entries)}
        assert len(entries) == count_basis(n, max_degree)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, alpha):
        return alpha in self._index

    def index(self, alpha):
        try:
            return self._index[alpha]
        except KeyError:
            raise KeyError(f"multi-index {alpha} not in basis(n={self.n}, r={self.max_degree})")

    def degree_slice(self, d):
        """Slice of self.entries holding the exact-degree-d block."""
        if d < 0 or d > self.max_degree:
            return slice(0, 0)
        return slice(self._degree_start[d], self._degree_start[d + 1])

    def entries_of_degree(self, d):
        return self.entries[self.degree_slice(d)]

    def __eq__(self, other):
        return (
            isinstance(other, DegreeBasis)
            and self.n == other.n
            and self.max_degree == other.max_degree
        )

    def __hash__(self):
        return hash((self.n, self.max_degree))

    def __repr__(self):
        return f"DegreeBasis(n={self.n}, max_degree={self.max_degree}, size={len(self)})"


_basis_cache = {}


def enumerate_basis(n, r):
    """Cached graded-lex basis of all |alpha| <= r in n variables."""
    key = (n, r)
    basis = _basis_cache.get(key)
    if basis is None:
        basis = DegreeBasis(n, r)
        _basis_cache[key] = basis
    return basis


class MomentVector:
    """Values m_alpha = E[x^alpha] for all |alpha| <= K, dense over a basis.

    m_0 = 1 is enforced (normalization); all entries must be finite.
    """

    def __init__(self, basis, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (len(basis),):
            raise ValueError(f"expected {len(basis)} values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("moment values must be finite")
        if abs(values[0] - 1.0) > 1e-9:
            raise ValueError(f"m_0 must be 1, got {values[0]}")
        self.basis = basis
        self.values = values

    @classmethod
    def from_dict(cls, basis, table, strict=True):
        vals = np.empty(len(basis))
        for k, alpha in enumerate(basis.entries):
            if alpha in table:
                vals[k] = table[alpha]
            elif strict:
                raise MissingMoment(alpha)
            else:
                vals[k] = 0.0
        return cls(basis, vals)

    @property
    def n(self):
        return self.basis.n

    @property
    def max_degree(self):
        return self.basis.max_degree

    def get(self, alpha, default=None):
        if alpha is None:
            return 0.0  # convention: negative multi-index => zero moment
        k = self.basis._index.get(alpha)
        if k is None:
            if default is None:
                raise MissingMoment(alpha)
            return default
        return self.values[k]

    def as_dict(self):
        return dict(zip(self.basis.entries, self.values))

    def mean(self):
        """First-moment vector (E[x_1], ..., E[x_n])."""
        n = self.basis.n
        out = np.empty(n)
        for i in range(n):
            e = tuple(1 if j == i else 0 for j in range(n))
            out[i] = self.get(e)
        return out

    def second_moment_matrix(self):
        n = self.basis.n
        out = np.empty((n, n))
        for i in range(n):
            for j in range(i, n):
                a = [0] * n
                a[i] += 1
                a[j] += 1
                out[i, j] = out[j, i] = self.get(tuple(a))
        return out

    def covariance(self):
        mu = self.mean()
        return self.second_moment_matrix() - np.outer(mu, mu)

    def copy(self):
        return MomentVector(self.basis, self.values.copy())

    def __repr__(self):
        return f"MomentVector(n={self.n}, K={self.max_degree})"


def gaussian_moment_vector(basis, mean, cov):
    """Moments of N(mean, cov) over a degree basis.

    Uses the Gaussian recursion E[x_i x^beta] = mean_i E[x^beta]
    + sum_j cov_ij beta_j E[x^(beta - e_j)], filled in graded order.
    """
    n = basis.n
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if mean.shape != (n,) or cov.shape != (n, n):
        raise ValueError("mean/cov shape does not match basis dimension")
    values = np.empty(len(basis))
    table = {}
    for k, alpha in enumerate(basis.entries):
        if sum(alpha) == 0:
            v = 1.0
        else:
            i = next(j for j in range(n) if alpha[j] >= 1)
            beta = mi_sub(alpha, tuple(1 if j == i else 0 for j in range(n)))
            v = mean[i] * table[beta]
            for j in range(n):
                if beta[j] >= 1 and cov[i, j] != 0.0:
                    gamma = mi_sub(beta, tuple(1 if l == j else 0 for l in range(n)))
                    v += cov[i, j] * beta[j] * table[gamma]
        table[alpha] = v
        values[k] = v
    return MomentVector(basis, values)
