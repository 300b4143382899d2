"""Stein-identity linear systems: moment closure and posterior recovery.

For the polynomial family p ~ exp(-lambda . phi), Stein's identity
E[s_i f + d_i f] = 0 applied to f = x^beta gives the linear relation

    sum_{|alpha| <= r} lambda_alpha alpha_i m_{alpha+beta-e_i}
        = beta_i m_{beta-e_i}

(negative multi-indices read as zero). Collecting rows (beta, i) and
splitting moments into knowns and unknowns yields Lambda_1 m_unknown = c.
The same machinery serves two modes:

* closure  — unknowns are the moments above the tracked degree K that the
  moment ODE requests; knowns are the tracked moments (plus lower closure
  layers when the excess degree is >= 2);
* recovery — unknowns are ALL moments 1 <= |gamma| <= K, reconstructed
  from a posterior lambda alone (m_0 = 1 fixed).

Rows that reference a moment above the current unknown range drop that
term to zero and are flagged truncated. Rows are ordered by
(|beta| ascending, beta graded lex, i ascending).

Also here: the closed-form row/unknown counting used for well-posedness
diagnostics, and the 1-D cone-CBF constrained closure that replaces the
second Stein layer with a realizability + barrier blend on the cubic
double well.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from math import comb

from .errors import (
    DivergedClosure,
    EmptyTargets,
    RankDeficient,
    UnderdeterminedSystem,
)
from .polybasis import (
    MomentVector,
    enumerate_basis,
    enumerate_exact_degree,
    mi_degree,
    mi_sub,
)


def stein_lhs_coeffs(lam, beta, i):
    """Left-hand-side pairs (alpha + beta - e_i, lambda_alpha * alpha_i)
    of the Stein row (beta, i), over |alpha| <= r with alpha_i >= 1.

    Together with the right-hand side beta_i * m_{beta - e_i} this is the
    full identity; beta_i = 0 rows are allowed and have zero rhs.
    """
    out = []
    for alpha, lam_a in zip(lam.basis.entries, lam.values):
        if alpha[i] == 0 or lam_a == 0.0:
            continue
        gamma = list(alpha)
        for j in range(len(beta)):
            gamma[j] += beta[j]
        gamma[i] -= 1
        out.append((tuple(gamma), lam_a * alpha[i]))
    return out


def stein_row_residual(lam, moments, beta, i):
    """Residual of one Stein row evaluated on a moment table."""
    lhs = 0.0
    for gamma, c in stein_lhs_coeffs(lam, beta, i):
        lhs += c * moments.get(gamma)
    rhs = 0.0
    if beta[i] >= 1:
        bm = mi_sub(beta, tuple(1 if j == i else 0 for j in range(len(beta))))
        rhs = beta[i] * moments.get(bm)
    return lhs - rhs


@dataclass
class ClosureConfig:
    """Row/target policy for closure-mode Stein systems.

    row_range: "standard" uses |beta| in [r, K] where K is the degree of
    the current known table (so deeper layers widen with it), "extended"
    uses [r, K+1], "first_layer" the square [r, r] subsystem.
    beta_degree_range: explicit (lo, hi) override of row_range.
    target_mode: "full_degree" solves a whole degree layer; "active"
    restricts unknowns to the target set actually requested by the moment
    ODE and drops rows touching no unknown.
    """

    row_range: str = "standard"
    beta_degree_range: tuple | None = None
    target_mode: str = "full_degree"
    include_zero_beta_rows: bool = False
    rank_rtol: float | None = None

    def resolve_range(self, r, K):
        if self.beta_degree_range is not None:
            return self.beta_degree_range
        if self.row_range == "standard":
            return (r, max(K, r))
        if self.row_range == "extended":
            return (r, max(K, r) + 1)
        if self.row_range == "first_layer":
            return (r, r)
        raise ValueError(f"unknown row_range {self.row_range!r}")


@dataclass
class RecoveryConfig:
    """Row policy for recovery-mode Stein systems.

    Defaults use every row (beta, i) with 0 <= |beta| <= K - 1, including
    the beta_i = 0 rows (for a degree-6 table in two dimensions: 42
    equations against 27 unknowns).  Rows with |beta| <= K + 1 - r carry
    no truncation at all, so at r = 2 the default system is exact: the
    |beta| = 0 rows are the mean relation and the |beta| = 1 rows are the
    precision-covariance relation.  Raising beta_degree_max adds rows
    whose truncated tails are larger; it is exposed for experiments."""

    beta_degree_max: int | None = None  # None -> K - 1
    include_zero_beta_rows: bool = True
    truncated_row_weight: float = 1.0
    rank_rtol: float | None = None


class SteinSystem:
    """Assembled linear system Lambda_1 m_unknown = c.

    matrix: dense (rows x unknowns); rhs_matrix: sparse (rows x knowns)
    mapping a vector of known values to the concrete right-hand side, so a
    cached factorization can rebuild the rhs each substep. known_entries
    orders the known vector; `rhs` holds the concrete right-hand side when
    the system was built against concrete moment values.
    """

    def __init__(self, rows, unknowns, matrix, rhs_matrix, known_entries, mode,
                 truncated_rows, rhs=None, rank_rtol=None):
        self.rows = rows
        self.unknowns = unknowns
        self.matrix = matrix
        self.rhs_matrix = rhs_matrix
        self.known_entries = known_entries
        self.mode = mode
        self.truncated_rows = truncated_rows
        self.rhs = rhs
        self.rank_rtol = rank_rtol

    @property
    def shape(self):
        return self.matrix.shape

    def rhs_for(self, known_values):
        return self.rhs_matrix @ np.asarray(known_values, dtype=float)


def _row_keys(n, degrees, include_zero_beta, directional_only=True):
    """Canonical row ordering: |beta| asc, beta graded lex, i asc."""
    keys = []
    for d in degrees:
        for beta in enumerate_exact_degree(n, d):
            for i in range(n):
                if beta[i] >= 1 or include_zero_beta:
                    keys.append((beta, i))
    return keys


def build_closure_system(lam, tracked, targets, config=None):
    """Stein system whose unknowns are the moments in `targets`.

    `tracked` is a MomentVector at degree <= K holding the known moments;
    extra known layers (for layered closure) are appended through
    `targets`/`extra_known`. `targets` is an iterable of multi-indices,
    all above the tracked degree; knowns of degree below min(target degree)
    are folded into the rhs, terms above max(target degree) truncated.
    """
    config = config or ClosureConfig()
    n = lam.n
    r = lam.r
    K = tracked.max_degree
    targets = sorted(set(tuple(t) for t in targets), key=lambda a: (mi_degree(a), a))
    if not targets:
        raise EmptyTargets("no unclosed moments to solve for")
    lo, hi = config.resolve_range(r, K)
    if lo < r:
        raise ValueError(f"beta degree range lower bound {lo} below r={r}")
    unknown_index = {g: j for j, g in enumerate(targets)}
    max_unknown_degree = mi_degree(targets[-1])
    known_entries = list(tracked.basis.entries)
    known_index = {g: j for j, g in enumerate(known_entries)}

    keys = _row_keys(n, range(lo, hi + 1), config.include_zero_beta_rows)
    mat_rows = []
    rhs_rows = []  # (cols, vals) into known vector
    kept_keys = []
    truncated = []
    for beta, i in keys:
        row = np.zeros(len(targets))
        rcols, rvals = [], []
        trunc = False
        touches_unknown = False
        for gamma, c in stein_lhs_coeffs(lam, beta, i):
            j = unknown_index.get(gamma)
            if j is not None:
                row[j] += c
                touches_unknown = True
                continue
            k = known_index.get(gamma)
            if k is not None:
                rcols.append(k)
                rvals.append(-c)
            elif mi_degree(gamma) > max_unknown_degree:
                trunc = True
            else:
                # degree inside (K, max target degree) but not a target:
                # active mode leaves such moments out of the solve entirely
                trunc = True
        if beta[i] >= 1:
            bm = mi_sub(beta, tuple(1 if j2 == i else 0 for j2 in range(n)))
            k = known_index.get(bm)
            if k is not None:
                rcols.append(k)
                rvals.append(float(beta[i]))
            else:
                j = unknown_index.get(bm)
                if j is not None:
                    row[j] -= beta[i]
                    touches_unknown = True
        if config.target_mode == "active" and not touches_unknown:
            continue
        kept_keys.append((beta, i))
        mat_rows.append(row)
        rhs_rows.append((rcols, rvals))
        truncated.append(trunc)

    if not mat_rows:
        raise EmptyTargets("no Stein rows touch the requested targets")
    matrix = np.vstack(mat_rows)
    if matrix.shape[0] < matrix.shape[1]:
        raise UnderdeterminedSystem(matrix.shape[0], matrix.shape[1])
    data, ri, ci = [], [], []
    for rr, (rcols, rvals) in enumerate(rhs_rows):
        for c0, v0 in zip(rcols, rvals):
            ri.append(rr)
            ci.append(c0)
            data.append(v0)
    rhs_matrix = sp.csr_matrix((data, (ri, ci)), shape=(len(kept_keys), len(known_entries)))
    rhs = rhs_matrix @ tracked.values
    return SteinSystem(kept_keys, targets, matrix, rhs_matrix, known_entries,
                       "closure", np.array(truncated, dtype=bool), rhs=rhs,
                       rank_rtol=config.rank_rtol)


class LstsqFactor:
    """Column-pivoted QR least-squares factorization, reusable across rhs.

    Rank threshold: eps-scaled largest pivot times max(rows, cols).
    Construction fails with RankDeficient when column rank < unknowns.
    """

    def __init__(self, matrix, rank_rtol=None):
        matrix = np.asarray(matrix, dtype=float)
        m, k = matrix.shape
        if m < k:
            raise UnderdeterminedSystem(m, k)
        self.matrix = matrix
        self.Q, self.R, self.piv = sla.qr(matrix, mode="economic", pivoting=True)
        diag = np.abs(np.diag(self.R))
        tol = (rank_rtol if rank_rtol is not None else np.finfo(float).eps * max(m, k))
        thresh = tol * (diag[0] if diag.size and diag[0] > 0 else 1.0)
        self.rank = int(np.sum(diag > thresh))
        if self.rank < k:
            raise RankDeficient(self.rank, k)
        self.n_solves = 0

    def solve(self, rhs):
        """Least-squares solution and residual 2-norm for one rhs."""
        y = self.Q.T @ rhs
        x_piv = sla.solve_triangular(self.R, y, check_finite=False)
        x = np.empty_like(x_piv)
        x[self.piv] = x_piv
        self.n_solves += 1
        resid = float(np.linalg.norm(self.matrix @ x - rhs))
        return x, resid


def solve_closure(system):
    """Exact solve when square/consistent, minimum-residual otherwise.

    Returns ({target: value}, residual_norm). RankDeficient is fatal."""
    factor = LstsqFactor(system.matrix, system.rank_rtol)
    x, resid = factor.solve(system.rhs)
    return dict(zip(system.unknowns, x)), resid


def diagnostics_record(system, factor=None, residual=None):
    """One machine-readable record for a closure/recovery solve.

    Returns a plain dict (mode, rows, unknowns, and when available rank,
    condition, residual) ready for newline-delimited JSON: callers emit one
    json.dumps(record) line per solve.
    """
    rows, cols = system.shape
    rec = {"mode": system.mode, "rows": int(rows), "unknowns": int(cols)}
    if factor is not None:
        rec["rank"] = int(factor.rank)
        diag = np.abs(np.diag(factor.R))
        rec["condition"] = float(diag[0] / diag[-1]) if diag.size and diag[-1] > 0 else float("inf")
    if residual is not None:
        rec["residual"] = float(residual)
    return rec


def layered_closure(lam, tracked, d_bar, config=None, active_targets=None):
    """Fill degrees K+1 .. K+d_bar by successive Stein solves.

    Layer j solves the degree-(K+j) moments using the tracked moments and
    all previously closed layers as knowns. Returns (values, residuals)
    where `values` maps each closed multi-index to its value. d_bar = 0 is
    a no-op. In active mode (`active_targets` given) each layer solves only
    the requested subset of its degree.
    """
    config = config or ClosureConfig()
    if d_bar == 0:
        return {}, []
    n = lam.n
    K = tracked.max_degree
    closed = {}
    residuals = []
    extended = tracked
    for j in range(1, d_bar + 1):
        if active_targets is not None:
            layer_targets = [g for g in active_targets if mi_degree(g) == K + j]
        else:
            layer_targets = enumerate_exact_degree(n, K + j)
        if not layer_targets:
            continue
        try:
            system = build_closure_system(lam, extended, layer_targets, config)
            values, resid = solve_closure(system)
        except (RankDeficient, UnderdeterminedSystem) as exc:
            exc.args = (f"layer {j}: {exc}",)
            raise
        closed.update(values)
        residuals.append(resid)
        if j < d_bar:
            # extend the known table with this layer for the next solve
            ext_basis = enumerate_basis(n, K + j)
            table = extended.as_dict()
            table.update(values)
            full = {a: table.get(a, 0.0) for a in ext_basis.entries}
            missing = [a for a in ext_basis.entries
                       if a not in table and mi_degree(a) == K + j]
            if missing:
                # active mode: unsolved same-degree moments enter later
                # layers as zeros (they were deliberately left out)
                pass
            extended = MomentVector(ext_basis, [full[a] for a in ext_basis.entries])
    return closed, residuals


class ClosureWindow:
    """Cached per-window closure operator (one factorization, many rhs).

    Built once per prediction window from a frozen lambda; `close` rebuilds
    the right-hand sides from fresh tracked values and back-substitutes,
    layer by layer. Counters record factorization/solve totals so the
    caching contract is checkable.
    """

    def __init__(self, lam, tracked_basis, d_bar, config=None, active_targets=None):
        config = config or ClosureConfig()
        self.config = config
        self.layers = []
        self.n_factorizations = 0
        n = lam.n
        K = tracked_basis.max_degree
        zero_tracked = np.zeros(len(tracked_basis))
        zero_tracked[0] = 1.0
        carrier = MomentVector(tracked_basis, zero_tracked)
        extended_basis = tracked_basis
        extended_values = None  # symbolic: known vector is [tracked; u_1; ...]
        known_sizes = [len(tracked_basis)]
        for j in range(1, d_bar + 1):
            if active_targets is not None:
                layer_targets = [g for g in active_targets if mi_degree(g) == K + j]
            else:
                layer_targets = enumerate_exact_degree(n, K + j)
            if not layer_targets:
                continue
            if j == 1:
                system = build_closure_system(lam, carrier, layer_targets, config)
            else:
                ext_basis = enumerate_basis(n, K + j - 1)
                zero_ext = np.zeros(len(ext_basis))
                zero_ext[0] = 1.0
                system = build_closure_system(
                    lam, MomentVector(ext_basis, zero_ext), layer_targets, config
                )
            factor = LstsqFactor(system.matrix, config.rank_rtol)
            self.n_factorizations += 1
            self.layers.append((system, factor))
        self.tracked_basis = tracked_basis
        self.K = K
        self.n = n
        targets = []
        for system, _ in self.layers:
            targets.extend(system.unknowns)
        self.targets = targets
        self.target_index = {g: i for i, g in enumerate(targets)}
        self.n_solves = 0
        self.last_residuals = []

    def close(self, tracked_values):
        """Closure values for all layer targets, given fresh tracked values."""
        values = np.asarray(tracked_values, dtype=float)
        out = []
        self.last_residuals = []
        solved = {}
        for j, (system, factor) in enumerate(self.layers):
            if j == 0:
                known = values
            else:
                # known vector ordered by the degree-(K+j) basis: tracked
                # entries keep their values, higher entries take solved ones
                ext_basis = enumerate_basis(self.n, self.K + j)
                known = np.zeros(len(ext_basis))
                known[: len(values)] = values
                for g, v in solved.items():
                    known[ext_basis.index(g)] = v
            rhs = system.rhs_for(known)
            x, resid = factor.solve(rhs)
            self.last_residuals.append(resid)
            solved.update(zip(system.unknowns, x))
            out.append(x)
            self.n_solves += 1
        return np.concatenate(out) if out else np.zeros(0)


def factor_cache(lam, tracked_basis, d_bar, config=None, active_targets=None):
    """Reusable factorization handle for one prediction window."""
    return ClosureWindow(lam, tracked_basis, d_bar, config, active_targets)


def build_recovery_system(lambda_plus, K, config=None):
    """Stein system reconstructing all moments 1 <= |gamma| <= K from lambda.

    m_0 = 1 is the only known; rows (beta, i) run over 0 <= |beta| <=
    beta_degree_max (default K - 1), with beta_i = 0 rows included by
    default. Any moment of degree > K appearing in a row is truncated to
    zero and the row flagged."""
    config = config or RecoveryConfig()
    n = lambda_plus.n
    basis = enumerate_basis(n, K)
    unknowns = list(basis.entries[1:])
    unknown_index = {g: j for j, g in enumerate(unknowns)}
    beta_max = config.beta_degree_max if config.beta_degree_max is not None else K - 1
    keys = _row_keys(n, range(0, beta_max + 1), config.include_zero_beta_rows)
    w = config.truncated_row_weight
    mat_rows, rhs_vals, kept, truncated = [], [], [], []
    for beta, i in keys:
        row = np.zeros(len(unknowns))
        rhs = 0.0
        trunc = False
        for gamma, c in stein_lhs_coeffs(lambda_plus, beta, i):
            j = unknown_index.get(gamma)
            if j is not None:
                row[j] += c
            elif mi_degree(gamma) == 0:
                rhs -= c  # coefficient lands on the known m_0 = 1
            else:
                trunc = True
        if beta[i] >= 1:
            bm = mi_sub(beta, tuple(1 if j2 == i else 0 for j2 in range(n)))
            if mi_degree(bm) == 0:
                rhs += float(beta[i])
            else:
                j = unknown_index.get(bm)
                if j is not None:
                    row[j] -= beta[i]
                else:
                    trunc = True  # |beta - e_i| > K cannot happen for beta_max <= K+1
        if trunc and w != 1.0:
            row = row * w
            rhs = rhs * w
        kept.append((beta, i))
        mat_rows.append(row)
        rhs_vals.append(rhs)
        truncated.append(trunc)
    matrix = np.vstack(mat_rows)
    if matrix.shape[0] < matrix.shape[1]:
        raise UnderdeterminedSystem(matrix.shape[0], matrix.shape[1])
    rhs = np.array(rhs_vals)
    rhs_matrix = sp.csr_matrix((len(kept), 1))
    return SteinSystem(kept, unknowns, matrix, rhs_matrix, [(0,) * n], "recovery",
                       np.array(truncated, dtype=bool), rhs=rhs,
                       rank_rtol=config.rank_rtol)


def solve_recovery(system, basis):
    """Solve a recovery-mode system; returns (MomentVector, residual)."""
    factor = LstsqFactor(system.matrix, system.rank_rtol)
    x, resid = factor.solve(system.rhs)
    values = np.concatenate(([1.0], x))
    if not np.all(np.isfinite(values)):
        raise DivergedClosure(np.nan, "recovery produced non-finite moments")
    return MomentVector(basis, values), resid


def count_system(n, r, mode="standard"):
    """Closed-form (rows, unknowns, ratio) for the augmented Stein closure.

    rows(standard) = sum_{j=0}^{r-2} n * C(r+j+n-2, n-1); extended adds
    j = r-1; first_layer keeps only j = 0. Unknowns are the degree-(K+1)
    moments: C(2r+n-2, n-1).
    """
    if n < 1 or r < 2:
        raise ValueError("need n >= 1 and r >= 2")
    if mode == "first_layer":
        js = [0]
    elif mode == "standard":
        js = list(range(0, r - 1))
    elif mode == "extended":
        js = list(range(0, r))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    rows = sum(n * comb(r + j + n - 2, n - 1) for j in js)
    unknowns = comb(2 * r + n - 2, n - 1)
    return rows, unknowns, rows / unknowns


# ---------------------------------------------------------------------------
# 1-D cone-CBF constrained closure for the cubic double well
# dX = (X - X^3) dt + sigma dW, retained even moments s_p = E[X^(2p)]
# ---------------------------------------------------------------------------


def dw_affine_system(sigma):
    """Affine control form sdot = A s + B u + c of the even-moment hierarchy
    s_p' = 2p s_p - 2p s_{p+1} + sigma^2 p (2p-1) s_{p-1}, with u = s_4."""
    s2 = sigma**2
    A = np.array(
        [
            [2.0, -2.0, 0.0],
            [6.0 * s2, 4.0, -4.0],
            [0.0, 15.0 * s2, 6.0],
        ]
    )
    B = np.array([0.0, 0.0, -6.0])
    c = np.array([s2, 0.0, 0.0])
    return A, B, c


@dataclass
class ConeCbf1dState:
    """Retained even moments and closure parameters for the 1-D double well."""

    s1: float
    s2: float
    s3: float
    sigma: float
    kappa_cbf: float
    theta_inf: float

    def vector(self):
        return np.array([self.s1, self.s2, self.s3])


def hankel_lower_bound(s1, s2, s3):
    """Schur-complement lower bound on u = s_4 from
    [[1, s1, s2], [s1, s2, s3], [s2, s3, u]] >= 0."""
    M = np.array([[1.0, s1], [s1, s2]])
    v = np.array([s2, s3])
    try:
        w = np.linalg.solve(M, v)
    except np.linalg.LinAlgError:
        w = np.linalg.lstsq(M, v, rcond=None)[0]
    return float(v @ w)


def cbf_upper_bound(s1, s2, s3, sigma, kappa_cbf):
    """Upper bound on u from gdot + kappa g >= 0 with barrier g = s1 s3 - s2^2.

    gdot = grad(g) . (A s + B u + c) and grad(g) . B = -6 s1 < 0, so the
    inequality caps u from above."""
    A, B, c = dw_affine_system(sigma)
    s = np.array([s1, s2, s3])
    grad = np.array([s3, -2.0 * s2, s1])
    g = s1 * s3 - s2**2
    free = grad @ (A @ s + c)
    denom = 6.0 * s1
    if denom <= 0:
        raise ValueError("s1 must be positive")
    return float((free + kappa_cbf * g) / denom)


def cone_cbf_closure_1d(state):
    """One-step constrained closure u = L_H + theta_inf (U_CBF - L_H).

    Returns (u, clamped): when the bounds cross (U_CBF < L_H) the closure
    clamps to the realizability bound L_H and flags it."""
    L = hankel_lower_bound(state.s1, state.s2, state.s3)
    U = cbf_upper_bound(state.s1, state.s2, state.s3, state.sigma, state.kappa_cbf)
    if U < L:
        return L, True
    return L + state.theta_inf * (U - L), False


def stationary_even_moments(sigma, pmax=4, nodes=800):
    """Even moments of p_inf(x) ~ exp((x^2 - x^4/2) / sigma^2) by
    deterministic Gauss-Legendre quadrature on an adaptive interval."""
    s2 = sigma**2

    def logpot(x):
        return (x**2 - 0.5 * x**4) / s2

    peak = logpot(1.0)
    L = 2.0
    while logpot(L) > peak - 120.0 and L < 60.0:
        L *= 1.25
    x, w = np.polynomial.legendre.leggauss(nodes)
    x = x * L
    w = w * L
    dens = np.exp(logpot(x) - peak)
    z = float(w @ dens)
    if not np.isfinite(z) or z <= 0:
        raise ArithmeticError("stationary quadrature failed to converge")
    out = []
    for p in range(1, pmax + 1):
        out.append(float(w @ (x ** (2 * p) * dens)) / z)
    return np.array(out)


def calibrate_theta_inf(sigma, kappa_cbf):
    """Stationary calibration fraction theta_inf in [0, 1]: the blend is
    made exact at the stationary moments of the known invariant density."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    s1, s2m, s3, u_star = stationary_even_moments(sigma, pmax=4)
    L = hankel_lower_bound(s1, s2m, s3)
    U = cbf_upper_bound(s1, s2m, s3, sigma, kappa_cbf)
    if U <= L:
        raise ArithmeticError("stationary bounds are not separated; cannot calibrate")
    theta = (u_star - L) / (U - L)
    return float(min(max(theta, 0.0), 1.0))
