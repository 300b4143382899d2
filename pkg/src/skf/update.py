"""Measurement updates in natural-parameter space.

A Gaussian observation y = g(x) + v, v ~ N(0, R), contributes the
log-likelihood energy

    (1/2) g(x)^T R^{-1} g(x) - z^T R^{-1} g(x)   (+ const)

which is itself a polynomial in x whenever g is polynomial. Provided
2 deg(g) <= r the posterior stays inside the exponential family
exp(-lambda . phi): the update is coefficient addition, with no
normalizing constant ever formed.

Moments are recovered from the posterior lambda through the Stein
recovery system, and an optional fixed-point refinement alternates
recover / refit / re-apply-measurement until the recovered moments
score-fit back to the posterior lambda.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import DegreeOverflow, SkfError
from .polybasis import enumerate_basis
from .score_match import ScoreParams, assemble_gram, fit_score
from .sde_model import Polynomial
from .stein import RecoveryConfig, build_recovery_system, solve_recovery


class MeasurementModel:
    """Polynomial observation map y = g(x) + v, v ~ N(0, R)."""

    def __init__(self, components, R):
        self.components = list(components)
        if not self.components:
            raise ValueError("need at least one observation component")
        self.n = self.components[0].n
        for g in self.components:
            if g.n != self.n:
                raise ValueError("observation components disagree on dimension")
        R = np.atleast_2d(np.asarray(R, dtype=float))
        if R.shape != (len(self.components),) * 2:
            raise ValueError("R shape does not match number of components")
        self.R = R
        self.R_inv = sla.inv(R)
        self.degree = max(g.degree for g in self.components)

    @classmethod
    def linear(cls, C, R, offset=None):
        """y = C x (+ offset) + v."""
        C = np.atleast_2d(np.asarray(C, dtype=float))
        n_y, n = C.shape
        comps = []
        for j in range(n_y):
            p = Polynomial.zero(n)
            for i in range(n):
                if C[j, i] != 0.0:
                    p = p + Polynomial.coordinate(n, i) * C[j, i]
            if offset is not None and offset[j] != 0.0:
                p = p + Polynomial.constant(n, float(offset[j]))
            comps.append(p)
        return cls(comps, R)

    def observe(self, x):
        """Noise-free observation g(x); x is (n,) or (N, n)."""
        vals = [g(x) for g in self.components]
        return np.stack(vals, axis=-1)

    def jacobian(self):
        """Matrix of polynomial partials dg_j/dx_i."""
        return [[g.diff(i) for i in range(self.n)] for g in self.components]


def likelihood_energy(model, z):
    """The polynomial (1/2) g^T R^{-1} g - z^T R^{-1} g in raw coordinates.

    The data-independent constant (1/2) z^T R^{-1} z is dropped."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    n = model.n
    energy = Polynomial.zero(n)
    Ri = model.R_inv
    for j, gj in enumerate(model.components):
        for k, gk in enumerate(model.components):
            if Ri[j, k] != 0.0:
                energy = energy + (gj * gk) * (0.5 * Ri[j, k])
    w = Ri @ z
    for k, gk in enumerate(model.components):
        if w[k] != 0.0:
            energy = energy + gk * (-w[k])
    return energy


def likelihood_score_params(model, z, r, mu=None, scale=None):
    """Likelihood contribution as ScoreParams on the degree-r basis.

    Raises DegreeOverflow when 2 deg(g) > r (the posterior would leave the
    family). When (mu, scale) are given the energy is re-expressed in the
    working coordinates w = (x - mu) / scale via exact substitution
    x = mu + scale * w. The constant coefficient is dropped (lambda_0 = 0).
    """
    if 2 * model.degree > r:
        raise DegreeOverflow(
            f"observation degree {model.degree} needs r >= {2 * model.degree}, got r={r}"
        )
    energy = likelihood_energy(model, z)
    if mu is not None:
        mu = np.asarray(mu, dtype=float)
        s = np.ones_like(mu) if scale is None else np.asarray(scale, dtype=float)
        energy = energy.affine_substitute(mu, s)
    basis = enumerate_basis(model.n, r)
    values = np.zeros(len(basis))
    for alpha, coef in energy.terms.items():
        if sum(alpha) == 0:
            continue
        values[basis.index(alpha)] = coef
    return ScoreParams(basis, values)


def conjugate_update(lam_prior, lam_lik):
    """Posterior natural parameters: coefficient addition on a shared basis."""
    if lam_prior.basis != lam_lik.basis:
        raise ValueError("prior and likelihood use different bases")
    return ScoreParams(lam_prior.basis, lam_prior.values + lam_lik.values)


def recover_posterior_moments(lam, K=None, config=None):
    """All moments |gamma| <= K implied by lambda, via Stein least squares.

    Returns (MomentVector, residual_norm)."""
    if K is None:
        K = 2 * lam.r - 2
    system = build_recovery_system(lam, K, config)
    basis = enumerate_basis(lam.n, K)
    return solve_recovery(system, basis)


@dataclass
class RefinementConfig:
    """Fixed-point consistency refinement after a conjugate update."""

    max_iters: int = 3
    tol: float = 1e-8
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)


def refine_consistency(lam_plus, lam_lik, refine=None, cond_cap=None):
    """Alternate (recover moments) / (refit score) / (re-apply measurement).

    Truncated recovery returns moments whose own score fit need not equal
    lambda_plus. Each pass refits lambda on the recovered moments, then
    re-applies the measurement by shifting the recovery input with the
    remaining discrepancy:

        lam_in <- lam_in + (lam_plus - refit)

    so the recovery of lam_in is pulled toward moments whose score fit IS
    lambda_plus. When recovery is exact (r = 2) the first pass already has
    refit == lambda_plus and the loop stops at one iteration. A full step
    can overshoot when the truncated tails are large, so a step is accepted
    only if it shrinks the defect; otherwise it is halved, and when halving
    stalls the best iterate found so far is returned. Stops at max_iters or
    when the remaining step drops below tol (relative). Returns
    (lambda, moments, residuals) where lambda is the refit at the returned
    iterate (so the pair is mutually consistent) and residuals holds one
    entry per accepted pass: the relative gap
    |lambda_plus - SM(recovered moments)| / |lambda_plus|, the part of the
    posterior score the truncated recovery failed to reproduce.
    """
    refine = refine or RefinementConfig()
    if lam_lik.basis != lam_plus.basis:
        raise ValueError("likelihood and posterior use different bases")
    K = 2 * lam_plus.r - 2
    n_iters = max(refine.max_iters, 1)
    basis = enumerate_basis(lam_plus.n, K)
    lam_scale = max(float(np.linalg.norm(lam_plus.values)), 1e-30)
    kwargs = {} if cond_cap is None else {"cond_cap": cond_cap}

    def one_pass(lam_in):
        system = build_recovery_system(lam_in, K, refine.recovery)
        moments, _ = solve_recovery(system, basis)
        lam_out = fit_score(assemble_gram(moments, lam_plus.r), **kwargs)
        return moments, lam_out, lam_plus.values - lam_out.values

    try:
        moments, lam_out, defect = one_pass(lam_plus)
    except Exception as exc:
        exc.args = (f"refinement iteration 1: {exc}",) + exc.args[1:]
        raise
    best = (lam_plus, moments, lam_out, defect)
    residuals = [float(np.linalg.norm(defect)) / lam_scale]
    for _ in range(1, n_iters):
        lam_best, _, _, defect_best = best
        if np.linalg.norm(defect_best) / max(1.0, np.linalg.norm(lam_best.values)) < refine.tol:
            break
        scale, accepted = 1.0, False
        for _ in range(3):
            lam_in = ScoreParams(lam_plus.basis, lam_best.values + scale * defect_best)
            try:
                moments, lam_out, defect = one_pass(lam_in)
            except (SkfError, np.linalg.LinAlgError, FloatingPointError, ValueError):
                scale *= 0.5
                continue
            if np.linalg.norm(defect) < np.linalg.norm(defect_best):
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
        best = (lam_in, moments, lam_out, defect)
        residuals.append(float(np.linalg.norm(defect)) / lam_scale)
    _, moments, lam_out, _ = best
    return lam_out, moments, residuals
