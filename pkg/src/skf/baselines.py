"""Classical nonlinear filters and Monte-Carlo references.

All baselines share the same continuous-discrete problem as the score
filter: a polynomial SDE between measurements, Gaussian observation noise
at update times. EKF/UKF propagate Gaussian beliefs with fixed-substep
integration; EnKF and the bootstrap particle filter propagate samples
with Euler-Maruyama. The MC moment oracle estimates E[x^alpha] from a
large path ensemble with batch standard errors.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .polybasis import MomentVector, enumerate_basis


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def euler_maruyama(sde, x, dt, n_steps, rng):
    """Advance samples x (N, n) or a single point (n,) by n_steps of size dt."""
    single = np.ndim(x) == 1
    X = np.atleast_2d(np.asarray(x, dtype=float)).copy()
    N = X.shape[0]
    const_h = sde.is_constant_diffusion()
    h_mat = sde.diffusion_matrix() if const_h else None
    sq = np.sqrt(dt)
    for _ in range(n_steps):
        drift = sde.drift_at(X)
        dW = rng.standard_normal((N, sde.n_w)) * sq
        if const_h:
            X = X + drift * dt + dW @ h_mat.T
        else:
            incr = np.zeros_like(X)
            for i in range(sde.n):
                for j in range(sde.n_w):
                    p = sde.diffusion[i][j]
                    if p.is_constant():
                        c = p.constant_value()
                        if c != 0.0:
                            incr[:, i] += c * dW[:, j]
                    else:
                        incr[:, i] += p(X) * dW[:, j]
            X = X + drift * dt + incr
    return X[0] if single else X


def simulate_path(sde, x0, dt, n_steps, rng, record_every=1):
    """Single trajectory, recorded every `record_every` substeps.

    Returns (times, states) with states[0] = x0."""
    x = np.asarray(x0, dtype=float).copy()
    times = [0.0]
    states = [x.copy()]
    t = 0.0
    for k in range(1, n_steps + 1):
        x = euler_maruyama(sde, x, dt, 1, rng)
        t = k * dt
        if k % record_every == 0:
            times.append(t)
            states.append(x.copy())
    return np.array(times), np.array(states)


# ---------------------------------------------------------------------------
# Gaussian baselines
# ---------------------------------------------------------------------------


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def copy(self):
        return GaussianBelief(self.mean.copy(), self.cov.copy())


def _chol_psd(P, jitter=1e-12):
    """Cholesky factor with escalating diagonal jitter for near-PSD input."""
    P = 0.5 * (P + P.T)
    scale = max(np.max(np.abs(np.diag(P))), 1.0)
    eps = jitter * scale
    for _ in range(8):
        try:
            return np.linalg.cholesky(P + eps * np.eye(P.shape[0]))
        except np.linalg.LinAlgError:
            eps *= 10.0
    raise np.linalg.LinAlgError("covariance is not positive semi-definite")


def _diffusion_outer(sde, x):
    """h(x) h(x)^T at a point (= 2H)."""
    h = sde.diffusion_matrix(None if sde.is_constant_diffusion() else x)
    return h @ h.T


def ekf_predict(belief, sde, dt, dt_ode=0.005):
    """Linearized mean/covariance propagation with fixed-substep RK4."""
    J = sde.drift_jacobian()
    n = sde.n

    def rhs(mu, P):
        A = np.array([[J[i][j](mu) for j in range(n)] for i in range(n)])
        dmu = sde.drift_at(mu)
        dP = A @ P + P @ A.T + _diffusion_outer(sde, mu)
        return dmu, dP

    steps = max(1, int(round(dt / dt_ode)))
    h = dt / steps
    mu, P = belief.mean.copy(), belief.cov.copy()
    for _ in range(steps):
        k1m, k1P = rhs(mu, P)
        k2m, k2P = rhs(mu + 0.5 * h * k1m, P + 0.5 * h * k1P)
        k3m, k3P = rhs(mu + 0.5 * h * k2m, P + 0.5 * h * k2P)
        k4m, k4P = rhs(mu + h * k3m, P + h * k3P)
        mu = mu + (h / 6.0) * (k1m + 2 * k2m + 2 * k3m + k4m)
        P = P + (h / 6.0) * (k1P + 2 * k2P + 2 * k3P + k4P)
        P = 0.5 * (P + P.T)
    return GaussianBelief(mu, P)


def _kalman_correct(mean, cov, Gmat, R, innov):
    S = Gmat @ cov @ Gmat.T + R
    K = np.linalg.solve(S, Gmat @ cov).T
    new_mean = mean + K @ innov
    IKG = np.eye(len(mean)) - K @ Gmat
    new_cov = IKG @ cov @ IKG.T + K @ R @ K.T
    return new_mean, 0.5 * (new_cov + new_cov.T)


def ekf_update(belief, model, z):
    jac = model.jacobian()
    Gmat = np.array(
        [[jac[j][i](belief.mean) for i in range(model.n)] for j in range(len(model.components))]
    )
    innov = np.atleast_1d(z) - model.observe(belief.mean)
    mean, cov = _kalman_correct(belief.mean, belief.cov, Gmat, model.R, innov)
    return GaussianBelief(mean, cov)


def ekf_step(belief, sde, model, z, dt, dt_ode=0.005):
    return ekf_update(ekf_predict(belief, sde, dt, dt_ode), model, z)


def sigma_points(mean, cov, alpha=1e-3, beta=2.0, kappa=0.0):
    """Scaled sigma points and (mean, cov) weights."""
    n = len(mean)
    lam = alpha**2 * (n + kappa) - n
    L = _chol_psd((n + lam) * cov)
    pts = np.vstack([mean, mean + L.T, mean - L.T])
    wm = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = lam / (n + lam) + (1.0 - alpha**2 + beta)
    return pts, wm, wc


def ukf_predict(belief, sde, dt, dt_ode=0.005, alpha=1e-3, beta=2.0, kappa=0.0):
    """Unscented propagation: sigma points are regenerated every substep,
    pushed through the deterministic drift (RK4), and process noise
    h h^T dt is added to the recombined covariance."""
    steps = max(1, int(round(dt / dt_ode)))
    h = dt / steps
    mu, P = belief.mean.copy(), belief.cov.copy()
    for _ in range(steps):
        pts, wm, wc = sigma_points(mu, P, alpha, beta, kappa)
        k1 = sde.drift_at(pts)
        k2 = sde.drift_at(pts + 0.5 * h * k1)
        k3 = sde.drift_at(pts + 0.5 * h * k2)
        k4 = sde.drift_at(pts + h * k3)
        pts = pts + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        mu = wm @ pts
        dev = pts - mu
        P = dev.T @ (dev * wc[:, None])
        Q = np.zeros((sde.n, sde.n))
        if sde.is_constant_diffusion():
            Q = _diffusion_outer(sde, mu)
        else:
            for p, w in zip(pts, wm):
                Q += w * _diffusion_outer(sde, p)
        P = 0.5 * (P + P.T) + Q * h
    return GaussianBelief(mu, P)


def ukf_update(belief, model, z, alpha=1e-3, beta=2.0, kappa=0.0):
    pts, wm, wc = sigma_points(belief.mean, belief.cov, alpha, beta, kappa)
    Y = model.observe(pts)
    y_bar = wm @ Y
    dy = Y - y_bar
    dx = pts - belief.mean
    Pyy = dy.T @ (dy * wc[:, None]) + model.R
    Pxy = dx.T @ (dy * wc[:, None])
    K = np.linalg.solve(Pyy, Pxy.T).T
    innov = np.atleast_1d(z) - y_bar
    mean = belief.mean + K @ innov
    cov = belief.cov - K @ Pyy @ K.T
    return GaussianBelief(mean, 0.5 * (cov + cov.T))


def ukf_step(belief, sde, model, z, dt, dt_ode=0.005):
    return ukf_update(ukf_predict(belief, sde, dt, dt_ode), model, z)


# ---------------------------------------------------------------------------
# ensemble baselines
# ---------------------------------------------------------------------------


def enkf_init(mean, cov, n_members, rng):
    return rng.multivariate_normal(mean, cov, size=n_members)


def enkf_predict(ensemble, sde, dt, dt_ode=0.005, rng=None):
    steps = max(1, int(round(dt / dt_ode)))
    return euler_maruyama(sde, ensemble, dt / steps, steps, rng)


def enkf_update(ensemble, model, z, rng):
    """Stochastic EnKF update with perturbed observations."""
    N = ensemble.shape[0]
    Y = model.observe(ensemble)
    x_bar = ensemble.mean(axis=0)
    y_bar = Y.mean(axis=0)
    dx = ensemble - x_bar
    dy = Y - y_bar
    Pxy = dx.T @ dy / (N - 1)
    Pyy = dy.T @ dy / (N - 1) + model.R
    K = np.linalg.solve(Pyy, Pxy.T).T
    Z = np.atleast_1d(z) + rng.multivariate_normal(np.zeros(model.R.shape[0]), model.R, size=N)
    return ensemble + (Z - Y) @ K.T


def enkf_step(ensemble, sde, model, z, dt, dt_ode=0.005, rng=None):
    return enkf_update(enkf_predict(ensemble, sde, dt, dt_ode, rng), model, z, rng)


def pf_init(mean, cov, n_particles, rng):
    particles = rng.multivariate_normal(mean, cov, size=n_particles)
    weights = np.full(n_particles, 1.0 / n_particles)
    return particles, weights


def systematic_resample(weights, rng):
    N = len(weights)
    positions = (rng.random() + np.arange(N)) / N
    return np.searchsorted(np.cumsum(weights), positions, side="right").clip(0, N - 1)


def pf_step(particles, weights, sde, model, z, dt, dt_ode=0.005, rng=None):
    """Bootstrap particle filter step; returns (particles, weights, info).

    Resamples systematically when ESS < N/2. A fully degenerate weight set
    (all likelihoods underflow) resets to uniform and flags it."""
    N = particles.shape[0]
    steps = max(1, int(round(dt / dt_ode)))
    particles = euler_maruyama(sde, particles, dt / steps, steps, rng)
    innov = np.atleast_1d(z) - model.observe(particles)
    Rc = np.linalg.cholesky(model.R)
    white = sla.solve_triangular(Rc, innov.T, lower=True).T
    loglik = -0.5 * np.sum(white**2, axis=1)
    logw = np.log(weights) + loglik
    logw -= logw.max()
    w = np.exp(logw)
    total = w.sum()
    info = {"degenerate": False, "resampled": False}
    if not np.isfinite(total) or total <= 0.0:
        w = np.full(N, 1.0 / N)
        info["degenerate"] = True
    else:
        w /= total
    ess = 1.0 / np.sum(w**2)
    info["ess"] = float(ess)
    if ess < N / 2.0:
        idx = systematic_resample(w, rng)
        particles = particles[idx]
        w = np.full(N, 1.0 / N)
        info["resampled"] = True
    return particles, w, info


def pf_estimate(particles, weights):
    return weights @ particles


# ---------------------------------------------------------------------------
# Monte-Carlo moment oracle
# ---------------------------------------------------------------------------


def sample_moments(X, basis):
    """Empirical moments of samples X (N, n) over a degree basis."""
    N, n = X.shape
    pows = [
        np.vander(X[:, i], basis.max_degree + 1, increasing=True) for i in range(n)
    ]
    vals = np.empty(len(basis))
    for k, alpha in enumerate(basis.entries):
        acc = np.ones(N)
        for i, ai in enumerate(alpha):
            if ai:
                acc = acc * pows[i][:, ai]
        vals[k] = acc.mean()
    return MomentVector(basis, vals)


def mc_moment_oracle(sde, mean0, cov0, T, K, n_paths=100_000, dt=0.001, seed=0,
                     n_batches=10):
    """Terminal moments E[x^alpha], |alpha| <= K, from an Euler-Maruyama
    ensemble started at N(mean0, cov0). Returns (MomentVector, se) where
    se holds batch-mean standard errors per entry."""
    rng = np.random.default_rng(seed)
    X = rng.multivariate_normal(np.asarray(mean0, dtype=float),
                                np.atleast_2d(cov0), size=n_paths)
    steps = max(1, int(round(T / dt)))
    X = euler_maruyama(sde, X, T / steps, steps, rng)
    basis = enumerate_basis(sde.n, K)
    est = sample_moments(X, basis)
    splits = np.array_split(np.arange(n_paths), n_batches)
    batch_vals = np.stack([sample_moments(X[s], basis).values for s in splits])
    se = batch_vals.std(axis=0, ddof=1) / np.sqrt(n_batches)
    return est, se
