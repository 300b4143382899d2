"""Score-matching normal equations, centering/scaling, conditioning."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import fd_gradient, gaussian_raw_moments, quadrature_moments
from skf.baselines import sample_moments
from skf.errors import SingularGram, IllConditioned
from skf.polybasis import MomentVector, enumerate_basis, mi_degree
from skf.score_match import (
    CenteringTransform,
    ScoreParams,
    assemble_gram,
    center_moments,
    condition_estimate,
    fit_score,
    rescale_score,
    scale_moments,
    sm_gradient,
    sm_objective,
    uncenter_moments,
    unscale_moments,
)


def gaussian_1d_moments(mu, P, K=2):
    return gaussian_raw_moments([mu], [[P]], K)


def test_gram_standard_normal():
    system = assemble_gram(gaussian_1d_moments(0.0, 1.0), 2)
    assert np.allclose(system.A, [[1.0, 0.0], [0.0, 4.0]])
    assert np.allclose(system.b, [0.0, 2.0])


def test_gram_shifted_gaussian():
    mu, P = 0.7, 2.3
    system = assemble_gram(gaussian_1d_moments(mu, P), 2)
    assert np.allclose(system.A, [[1.0, 2 * mu], [2 * mu, 4 * (mu**2 + P)]])
    assert np.allclose(system.b, [0.0, 2.0])


def test_gram_r1_linear_block():
    # gradients of linear monomials are constant unit vectors, so the r=1
    # Gram is m0 times the identity and the Laplacian vector vanishes
    rng = np.random.default_rng(8)
    X = rng.normal(size=(300, 3)) @ np.diag([1.0, 0.5, 2.0]) + [0.2, -0.1, 0.4]
    basis = enumerate_basis(3, 2)
    m = sample_moments(X, basis)
    system = assemble_gram(m, 1)
    assert np.allclose(system.A, np.eye(3))
    assert np.allclose(system.b, 0.0)


def test_fit_score_gaussian_closed_form():
    mu, P = -0.4, 1.7
    lam = fit_score(assemble_gram(gaussian_1d_moments(mu, P), 2))
    assert lam.get((1,)) == pytest.approx(-mu / P)
    assert lam.get((2,)) == pytest.approx(1 / (2 * P))
    lam0 = fit_score(assemble_gram(gaussian_1d_moments(0.0, 1.0), 2))
    assert np.allclose(lam0.values, [0.0, 0.0, 0.5], atol=1e-14)


def test_fit_score_recovers_quartic_2d():
    basis = enumerate_basis(2, 4)
    lam_true = np.zeros(len(basis))
    lam_true[basis.index((2, 0))] = 0.4
    lam_true[basis.index((0, 2))] = 0.6
    lam_true[basis.index((1, 1))] = 0.15
    lam_true[basis.index((4, 0))] = 0.12
    lam_true[basis.index((0, 4))] = 0.08
    lam_true[basis.index((2, 2))] = 0.1
    lam_true[basis.index((1, 0))] = -0.2
    moments = quadrature_moments(basis, lam_true, 6)
    lam = fit_score(assemble_gram(moments, 4))
    rel = np.linalg.norm(lam.values - lam_true) / np.linalg.norm(lam_true)
    assert rel < 1e-6


def test_fit_score_singular_input():
    # moments of a point mass are degenerate
    basis = enumerate_basis(1, 2)
    m = MomentVector(basis, [1.0, 0.5, 0.25])
    with pytest.raises(SingularGram):
        fit_score(assemble_gram(m, 2))


def test_fit_score_condition_warning():
    mu, P = 0.0, 1e-12
    with pytest.warns(IllConditioned):
        fit_score(assemble_gram(gaussian_1d_moments(mu, P), 2), cond_cap=1e6)


def test_sm_objective_minimum():
    system = assemble_gram(gaussian_1d_moments(0.3, 0.8), 2)
    lam_star = fit_score(system)
    j_star = sm_objective(lam_star, system)
    b = system.b
    assert j_star == pytest.approx(-0.5 * b @ np.linalg.solve(system.A, b))
    zero = ScoreParams(system.basis, np.zeros(len(system.basis)))
    assert sm_objective(zero, system) == 0.0
    rng = np.random.default_rng(4)
    for _ in range(25):
        lam = ScoreParams(system.basis, np.concatenate(([0.0], rng.normal(size=2))))
        assert sm_objective(lam, system) >= j_star - 1e-12


def test_sm_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(400, 2)) * [1.0, 0.6] + [0.3, -0.2]
    basis = enumerate_basis(2, 6)
    system = assemble_gram(sample_moments(X, basis), 3)
    lam_basis = enumerate_basis(2, 3)
    for _ in range(5):
        x0 = rng.normal(size=len(lam_basis) - 1) * 0.5

        def obj(v):
            lam = ScoreParams(lam_basis, np.concatenate(([0.0], v)))
            return sm_objective(lam, system)

        lam = ScoreParams(lam_basis, np.concatenate(([0.0], x0)))
        analytic = sm_gradient(lam, system)
        numeric = fd_gradient(obj, x0, h=1e-6)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-30)
        assert rel < 1e-6


def test_gram_positive_definite_from_samples():
    rng = np.random.default_rng(14)
    X = np.column_stack([rng.normal(size=600), rng.gamma(2.0, 1.0, size=600)])
    basis = enumerate_basis(2, 6)
    system = assemble_gram(sample_moments(X, basis), 3)
    eigs = np.linalg.eigvalsh(system.A)
    assert eigs.min() > 0


def test_center_moments_gaussian():
    mu, P = 1.3, 0.6
    m = gaussian_1d_moments(mu, P)
    c = center_moments(m, np.array([mu]))
    assert np.allclose(c.values, [1.0, 0.0, P])
    same = center_moments(m, np.zeros(1))
    assert np.allclose(same.values, m.values)


def test_center_moments_matches_direct_centering():
    # centering raw sample moments must agree with moments of pre-centered
    # samples; this is an exact algebraic identity, not a statistical one
    rng = np.random.default_rng(2)
    X = np.column_stack([rng.gamma(3.0, 0.5, size=800), rng.normal(2.0, 1.5, size=800)])
    basis = enumerate_basis(2, 3)
    raw = sample_moments(X, basis)
    mu = X.mean(axis=0)
    direct = sample_moments(X - mu, basis)
    routed = center_moments(raw, mu)
    assert np.allclose(routed.values, direct.values, atol=1e-10)


def test_uncenter_round_trip():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(300, 2)) + [0.5, -1.0]
    basis = enumerate_basis(2, 4)
    m = sample_moments(X, basis)
    mu = np.array([0.8, -0.3])
    back = uncenter_moments(center_moments(m, mu), mu)
    assert np.allclose(back.values, m.values, atol=1e-10)
    c = center_moments(gaussian_1d_moments(0.0, 0.9), np.zeros(1))
    up = uncenter_moments(MomentVector(c.basis, [1.0, 0.0, 0.9]), np.array([2.0]))
    assert np.allclose(up.values, [1.0, 2.0, 4.9])


def test_scale_round_trip_and_identity():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(200, 2))
    basis = enumerate_basis(2, 5)
    m = sample_moments(X, basis)
    s = np.array([2.5, 0.4])
    assert np.allclose(scale_moments(m, np.ones(2)).values, m.values)
    back = unscale_moments(scale_moments(m, s), s)
    assert np.allclose(back.values, m.values, atol=1e-12)


def test_rescale_score_gaussian_variance():
    basis = enumerate_basis(1, 2)
    lam = ScoreParams(basis, [0.0, 0.0, 1.0 / 8.0])  # N(0, 4)
    w = rescale_score(lam, np.array([2.0]))
    assert w.get((2,)) == pytest.approx(0.5)
    assert w.get((1,)) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_centering_transform_round_trip(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(150, 2)) * rng.uniform(0.2, 3.0, size=2) + rng.normal(size=2)
    basis = enumerate_basis(2, 4)
    raw = sample_moments(X, basis)
    tf = CenteringTransform.from_moments(raw)
    back = tf.from_working(tf.to_working(raw))
    scale = np.abs(raw.values) + 1.0
    assert np.max(np.abs(back.values - raw.values) / scale) < 1e-12


def test_condition_estimate():
    assert condition_estimate(np.eye(4)) == pytest.approx(1.0)
    assert condition_estimate(np.diag([1.0, 1e-6])) == pytest.approx(1e6, rel=1e-9)
    assert condition_estimate(np.zeros((2, 2))) == np.inf


def test_graceful_degradation_bound():
    # relative moment error eps moves lambda by at most C * cond(A) * eps
    rng = np.random.default_rng(13)
    basis = enumerate_basis(2, 6)
    X = rng.normal(size=(2000, 2)) * [1.1, 0.7] + [0.2, 0.1]
    m = sample_moments(X, basis)
    system = assemble_gram(m, 3)
    lam = fit_score(system)
    kappa = condition_estimate(system.A)
    for _ in range(20):
        eps = 10.0 ** rng.uniform(-7, -4)
        noisy_vals = m.values * (1 + eps * rng.uniform(-1, 1, size=len(m.values)))
        noisy_vals[0] = 1.0
        noisy = MomentVector(basis, noisy_vals)
        lam2 = fit_score(assemble_gram(noisy, 3))
        rel = np.linalg.norm(lam2.values - lam.values) / np.linalg.norm(lam.values)
        assert rel <= 10.0 * kappa * eps


def test_r2_fit_is_information_map():
    # fitted quadratic coefficients encode the precision matrix, Omega = 2
    # Lambda_2 with eta = -lambda_1, for Gaussian moment inputs
    rng = np.random.default_rng(17)
    for _ in range(10):
        n = int(rng.integers(1, 4))
        mu = rng.normal(size=n)
        L = rng.normal(size=(n, n)) * 0.4 + np.eye(n)
        P = L @ L.T
        lam = fit_score(assemble_gram(gaussian_raw_moments(mu, P, 2), 2))
        omega = np.linalg.inv(P)
        eta = omega @ mu
        lam2 = np.empty((n, n))
        lam1 = np.empty(n)
        for i in range(n):
            e = tuple(1 if k == i else 0 for k in range(n))
            lam1[i] = lam.get(e)
            for j in range(n):
                q = tuple((1 if k == i else 0) + (1 if k == j else 0) for k in range(n))
                lam2[i, j] = lam.get(q) if i == j else 0.5 * lam.get(q)
        assert np.allclose(-lam1, eta, rtol=1e-8, atol=1e-10)
        assert np.allclose(2 * lam2, omega, rtol=1e-8, atol=1e-10)
