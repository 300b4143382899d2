"""Polynomial SDE representation, generator application, moment ODE assembly."""

import numpy as np
import pytest

from skf.baselines import sample_moments
from skf.bench_cli import SYSTEMS
from skf.polybasis import MomentVector, enumerate_basis, enumerate_exact_degree, mi_degree
from skf.sde_model import (
    Polynomial,
    PolynomialSDE,
    apply_generator,
    build_moment_operator,
    center_sde,
    excess_degree,
    mean_drift,
)


def make_ou(sigma=0.5):
    return PolynomialSDE(
        drift=[Polynomial(1, {(1,): -1.0})],
        diffusion=[[Polynomial.constant(1, sigma)]],
    )


def test_excess_degree_by_system():
    duffing, _ = SYSTEMS["duffing"].make({})
    assert excess_degree(duffing) == 1
    assert excess_degree(make_ou()) == 0
    dw, _ = SYSTEMS["double_well"].make({})
    assert excess_degree(dw) == 2
    tracer, _ = SYSTEMS["tracer_3d"].make({})
    assert excess_degree(tracer) == 1


def test_generator_ou_second_moment():
    sigma = 0.5
    gen = apply_generator(make_ou(sigma), (2,))
    assert gen.terms == {(2,): -2.0, (0,): sigma**2}


def test_generator_duffing_unclosed_term():
    sde, p = SYSTEMS["duffing"].make({})
    beta = p["beta"]
    for a, b in [(1, 1), (0, 2), (2, 1), (1, 3)]:
        gen = apply_generator(sde, (a, b))
        # the stiffness pushes degree (a,b) up to x1^(a+2) x2^(b-1)
        assert gen.terms.get((a + 2, b - 1)) == pytest.approx(-b * beta)


def test_generator_lv_unclosed_terms():
    sde, p = SYSTEMS["lotka_volterra"].make({})
    for a, b in [(1, 1), (2, 1), (1, 2)]:
        gen = apply_generator(sde, (a, b))
        assert gen.terms.get((a, b + 1)) == pytest.approx(-a * p["beta"])
        assert gen.terms.get((a + 1, b)) == pytest.approx(b * p["delta"])


def test_moment_operator_ou_closed():
    sde = make_ou(0.5)
    op = build_moment_operator(sde, 2)
    assert op.unclosed_targets == []
    m = np.array([1.0, 0.3, 1.7])
    dm = op.apply(m)
    assert dm[0] == 0.0
    assert dm[1] == pytest.approx(-0.3)
    assert dm[2] == pytest.approx(-2 * 1.7 + 0.25)


def test_moment_operator_duffing_targets():
    sde, _ = SYSTEMS["duffing"].make({})
    op = build_moment_operator(sde, 4)
    expect = set()
    for alpha in enumerate_exact_degree(2, 4):
        if alpha[1] >= 1:
            expect.add((alpha[0] + 2, alpha[1] - 1))
    expect = {g for g in expect if mi_degree(g) == 5}
    assert set(op.unclosed_targets) == expect


def test_moment_operator_coupled_targets():
    sde, _ = SYSTEMS["coupled_oscillators"].make({"n_osc": 2})
    op = build_moment_operator(sde, 4)
    expect = set()
    for alpha in enumerate_exact_degree(4, 4):
        for j in range(2):
            q, mom = j, 2 + j
            if alpha[mom] >= 1:
                g = list(alpha)
                g[mom] -= 1
                g[q] += 2
                expect.add(tuple(g))
    assert set(op.unclosed_targets) == expect


def test_moment_operator_linearity():
    sde, _ = SYSTEMS["duffing"].make({})
    op = build_moment_operator(sde, 4)
    rng = np.random.default_rng(3)
    m1 = rng.normal(size=len(op.basis))
    m2 = rng.normal(size=len(op.basis))
    u1 = rng.normal(size=len(op.unclosed_targets))
    u2 = rng.normal(size=len(op.unclosed_targets))
    lhs = op.apply(m1 + m2, u1 + u2)
    rhs = op.apply(m1, u1) + op.apply(m2, u2)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_generator_degree_bound_random_sdes():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(1, 4))
        deg = int(rng.integers(1, 4))
        drift = []
        basis = enumerate_basis(n, deg)
        for _ in range(n):
            terms = {}
            for a in basis.entries:
                if rng.random() < 0.4:
                    terms[a] = float(rng.normal())
            drift.append(Polynomial(n, terms))
        diffusion = [[Polynomial.constant(n, float(rng.normal())) for _ in range(n)]
                     for _ in range(n)]
        sde = PolynomialSDE(drift, diffusion)
        d_bar = excess_degree(sde)
        for _ in range(5):
            alpha = tuple(int(e) for e in rng.integers(0, 4, size=n))
            if mi_degree(alpha) == 0:
                continue
            gen = apply_generator(sde, alpha)
            assert gen.degree <= mi_degree(alpha) + d_bar


def test_no_unclosed_targets_for_linear_sde():
    n = 3
    rng = np.random.default_rng(5)
    A = rng.normal(size=(n, n))
    drift = [Polynomial(n, {tuple(1 if j == k else 0 for k in range(n)): A[i, j]
                            for j in range(n)}) for i in range(n)]
    diffusion = [[Polynomial.constant(n, 0.3 if i == j else 0.0) for j in range(n)]
                 for i in range(n)]
    sde = PolynomialSDE(drift, diffusion)
    assert excess_degree(sde) == 0
    for K in (2, 3, 4):
        assert build_moment_operator(sde, K).unclosed_targets == []


def test_center_sde_lv_display():
    sde, p = SYSTEMS["lotka_volterra"].make({})
    alpha, beta = p["alpha"], p["beta"]
    mu = np.array([1.4, 0.8])
    basis = enumerate_basis(2, 2)
    vals = {(0, 0): 1.0, (0, 1): 0.0, (1, 0): 0.0,
            (0, 2): 0.05, (1, 1): 0.02, (2, 0): 0.04}
    cm = MomentVector(basis, [vals[a] for a in basis.entries])
    centered = center_sde(sde, mu, cm)
    z1 = centered.drift[0]
    assert z1.terms.get((1, 0), 0.0) == pytest.approx(alpha - beta * mu[1])
    assert z1.terms.get((0, 1), 0.0) == pytest.approx(-beta * mu[0])
    assert z1.terms.get((1, 1), 0.0) == pytest.approx(-beta)
    assert z1.terms.get((0, 0), 0.0) == pytest.approx(beta * vals[(1, 1)])


def test_center_sde_oscillator_stiffness_shift():
    # a single oscillator: the linearized position coefficient in the
    # momentum equation picks up the quadratic term, -(alpha + 2 beta mu_q)
    sde, p = SYSTEMS["coupled_oscillators"].make({"n_osc": 1})
    mu = np.array([0.3, -0.1])
    basis = enumerate_basis(2, 2)
    zero = {a: 0.0 for a in basis.entries}
    zero[(0, 0)] = 1.0
    cm = MomentVector(basis, [zero[a] for a in basis.entries])
    centered = center_sde(sde, mu, cm)
    coeff = centered.drift[1].terms.get((1, 0), 0.0)
    assert coeff == pytest.approx(-(p["alpha"] + 2 * p["beta"] * mu[0]))


def test_center_sde_linear_constant_vanishes():
    n = 2
    drift = [Polynomial(n, {(1, 0): -1.0, (0, 0): 0.7}),
             Polynomial(n, {(0, 1): -2.0, (1, 0): 0.5, (0, 0): -0.2})]
    diffusion = [[Polynomial.constant(n, 0.4), Polynomial.zero(n)],
                 [Polynomial.zero(n), Polynomial.constant(n, 0.4)]]
    sde = PolynomialSDE(drift, diffusion)
    basis = enumerate_basis(2, 2)
    vals = np.zeros(len(basis))
    vals[0] = 1.0
    cm = MomentVector(basis, vals)
    centered = center_sde(sde, np.array([0.9, -1.1]), cm)
    for d in centered.drift:
        assert d.terms.get((0, 0), 0.0) == pytest.approx(0.0, abs=1e-14)


def test_mean_drift_examples():
    basis1 = enumerate_basis(1, 2)
    m = MomentVector(basis1, [1.0, 0.5, 0.5])
    assert mean_drift(make_ou(), m) == pytest.approx([-0.5])

    sde, p = SYSTEMS["lotka_volterra"].make({})
    eq = np.array([p["gamma"] / p["delta"], p["alpha"] / p["beta"]])
    basis2 = enumerate_basis(2, 2)
    vals = {(0, 0): 1.0, (0, 1): eq[1], (1, 0): eq[0],
            (0, 2): eq[1] ** 2, (1, 1): eq[0] * eq[1], (2, 0): eq[0] ** 2}
    m2 = MomentVector(basis2, [vals[a] for a in basis2.entries])
    assert np.allclose(mean_drift(sde, m2), [0.0, 0.0], atol=1e-12)

    duf, p = SYSTEMS["duffing"].make({})
    rng = np.random.default_rng(0)
    X = rng.normal([0.4, -0.2], 0.3, size=(500, 2))
    raw = sample_moments(X, basis2)
    got = mean_drift(duf, raw)
    m10, m01, m20 = raw.get((1, 0)), raw.get((0, 1)), raw.get((2, 0))
    expect = [m01, -p["delta"] * m01 - p["alpha"] * m10 - p["beta"] * m20]
    assert np.allclose(got, expect, atol=1e-12)


def test_centered_drift_has_zero_expectation():
    rng = np.random.default_rng(21)
    for name in ("duffing", "lotka_volterra", "double_well"):
        sde, _ = SYSTEMS[name].make({})
        X = rng.normal(0.5, 0.4, size=(400, 2))
        mu = X.mean(axis=0)
        basis = enumerate_basis(2, max(3, sde.drift_degree))
        cm = sample_moments(X - mu, basis)
        centered = center_sde(sde, mu, cm)
        assert np.allclose(mean_drift(centered, cm), 0.0, atol=1e-12)
