"""Benchmark harness: named systems, experiment configs, and a CLI.

Three experiment kinds:

* moments — propagate the moment table through a system with no
  measurements and score the terminal moments against a Monte-Carlo
  ensemble, per degree;
* filter  — run the score filter against EKF/UKF/EnKF/PF on simulated
  trajectories with noisy observations, reporting per-seed RMSE;
* cone-cbf — the 1-D double-well study: unconstrained closure until it
  diverges, then the constrained cone/barrier closure to the horizon.

Configs are plain JSON; results land in an output directory as CSV plus
a summary.json embedding the resolved config and package version.
"""

import argparse
import csv
import json
import sys
import time
import traceback
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .baselines import (
    GaussianBelief,
    ekf_step,
    enkf_init,
    enkf_step,
    euler_maruyama,
    pf_estimate,
    pf_init,
    pf_step,
    sample_moments,
    ukf_step,
)
from .errors import SkfError
from .polybasis import enumerate_basis, mi_degree
from .score_match import center_moments
from .sde_model import Polynomial, PolynomialSDE
from .skf import FilterConfig, estimate, init_filter, predict, update_step
from .stein import (
    ClosureConfig,
    ConeCbf1dState,
    calibrate_theta_inf,
    cone_cbf_closure_1d,
    count_system,
    dw_affine_system,
    hankel_lower_bound,
    cbf_upper_bound,
)
from .update import MeasurementModel


# ---------------------------------------------------------------------------
# named systems
# ---------------------------------------------------------------------------

_POS_PATTERN = (0.3, -0.2, 0.1, -0.3, 0.15, 0.25, -0.1, 0.2)


def _poly(n, terms):
    return Polynomial(n, terms)


def _make_ou(p):
    n = 1
    drift = [_poly(n, {(1,): -p["rate"]})]
    diffusion = [[Polynomial.constant(n, p["sigma"])]]
    return PolynomialSDE(drift, diffusion)


def _make_duffing(p):
    n = 2
    drift = [
        _poly(n, {(0, 1): 1.0}),
        _poly(n, {(0, 1): -p["delta"], (1, 0): -p["alpha"], (2, 0): -p["beta"]}),
    ]
    diffusion = [
        [Polynomial.zero(n)],
        [Polynomial.constant(n, p["sigma"])],
    ]
    return PolynomialSDE(drift, diffusion)


def _make_lv(p):
    n = 2
    drift = [
        _poly(n, {(1, 0): p["alpha"], (1, 1): -p["beta"]}),
        _poly(n, {(0, 1): -p["gamma"], (1, 1): p["delta"]}),
    ]
    diffusion = [
        [Polynomial.constant(n, p["sigma1"]), Polynomial.zero(n)],
        [Polynomial.zero(n), Polynomial.constant(n, p["sigma2"])],
    ]
    return PolynomialSDE(drift, diffusion)


def _make_coupled(p):
    N = int(p["n_osc"])
    n = 2 * N
    gam, alp, bet, kap, sig = p["gamma"], p["alpha"], p["beta"], p["kappa"], p["sigma"]

    def q(i):
        return tuple(1 if j == i else 0 for j in range(n))

    drift = []
    for i in range(N):
        drift.append(_poly(n, {q(N + i): 1.0}))
    for i in range(N):
        terms = {q(N + i): -gam, q(i): -alp}
        sq = tuple(2 if j == i else 0 for j in range(n))
        terms[sq] = -bet
        # chain coupling with free ends (q_0 := q_1, q_{N+1} := q_N)
        neighbors = []
        if i > 0:
            neighbors.append(i - 1)
        if i < N - 1:
            neighbors.append(i + 1)
        terms[q(i)] = terms.get(q(i), 0.0) - kap * len(neighbors)
        for j in neighbors:
            terms[q(j)] = terms.get(q(j), 0.0) + kap
        drift.append(_poly(n, {a: c for a, c in terms.items() if c != 0.0}))
    diffusion = [[Polynomial.zero(n)] * N for _ in range(N)]
    for i in range(N):
        row = [Polynomial.zero(n)] * N
        row[i] = Polynomial.constant(n, sig)
        diffusion.append(row)
    return PolynomialSDE(drift, diffusion)


def _make_double_well(p):
    n = 2
    drift = [
        _poly(n, {(1, 0): 1.0, (3, 0): -1.0}),
        _poly(n, {(0, 1): 1.0, (0, 3): -1.0}),
    ]
    s = p["sigma"]
    diffusion = [
        [Polynomial.constant(n, s), Polynomial.zero(n)],
        [Polynomial.zero(n), Polynomial.constant(n, s)],
    ]
    return PolynomialSDE(drift, diffusion)


def _make_tracer(p):
    n = 3
    eps, om, alp = p["eps"], p["omega"], p["alpha"]
    drift = [
        _poly(n, {(1, 0, 0): eps, (0, 1, 0): om}),
        _poly(n, {(1, 0, 0): -om, (0, 1, 0): eps}),
        _poly(n, {(0, 0, 1): -2.0 * eps, (2, 0, 0): alp, (0, 2, 0): alp}),
    ]
    s = np.sqrt(2.0 * p["kappa"])
    diffusion = [
        [Polynomial.constant(n, s) if i == j else Polynomial.zero(n) for j in range(n)]
        for i in range(n)
    ]
    return PolynomialSDE(drift, diffusion)


@dataclass
class SystemSpec:
    name: str
    build: object
    params: dict
    description: str
    moment_defaults: object = None  # params -> dict
    filter_defaults: object = None  # params -> dict

    def make(self, overrides=None):
        p = dict(self.params)
        if overrides:
            unknown = set(overrides) - set(p)
            if unknown:
                raise KeyError(f"unknown {self.name} parameters: {sorted(unknown)}")
            p.update(overrides)
        return self.build(p), p


def _coupled_init_mean(N):
    q0 = [_POS_PATTERN[i % len(_POS_PATTERN)] for i in range(N)]
    return q0 + [0.0] * N


SYSTEMS = {
    "ou_linear": SystemSpec(
        name="ou_linear",
        build=_make_ou,
        params={"rate": 1.0, "sigma": 0.5},
        description="1-D Ornstein-Uhlenbeck (linear, exact Gaussian)",
        moment_defaults=lambda p: {
            "r": 4, "T": 1.0, "mean0": [1.0], "cov0": [[0.04]],
        },
        filter_defaults=lambda p: {
            "obs_indices": [0], "obs_var": 0.04, "dt_pred": 0.2, "n_cycles": 25,
            "init_mean": [1.0], "init_cov_diag": [0.04],
        },
    ),
    "duffing": SystemSpec(
        name="duffing",
        build=_make_duffing,
        params={"delta": 0.3, "alpha": 1.0, "beta": 0.6, "sigma": 0.4},
        description="stochastic Duffing oscillator (quadratic stiffness)",
        moment_defaults=lambda p: {
            "r": 4, "T": 2.0, "mean0": [0.5, 0.0], "cov0": [[0.04, 0.0], [0.0, 0.04]],
        },
        filter_defaults=lambda p: {
            "system_params": {"sigma": 0.15},
            "obs_indices": [0], "obs_var": 0.04, "dt_pred": 0.2, "n_cycles": 25,
            "init_mean": [0.5, 0.0], "init_cov_diag": [0.01, 0.01],
        },
    ),
    "lotka_volterra": SystemSpec(
        name="lotka_volterra",
        build=_make_lv,
        params={"alpha": 1.0, "beta": 0.5, "gamma": 0.8, "delta": 0.3,
                "sigma1": 0.3, "sigma2": 0.2},
        description="stochastic Lotka-Volterra with additive noise",
        moment_defaults=lambda p: {
            "r": 6, "T": 1.5,
            "mean0": [p["gamma"] / p["delta"], p["alpha"] / p["beta"]],
            "cov0": [[0.1, 0.0], [0.0, 0.1]],
        },
        filter_defaults=lambda p: {
            "obs_indices": [0], "obs_var": 0.04, "dt_pred": 0.2, "n_cycles": 25,
            "init_mean": [p["gamma"] / p["delta"], p["alpha"] / p["beta"]],
            "init_cov_diag": [0.1, 0.1],
        },
    ),
    "coupled_oscillators": SystemSpec(
        name="coupled_oscillators",
        build=_make_coupled,
        params={"n_osc": 2, "gamma": 0.3, "alpha": 1.0, "beta": 0.6,
                "kappa": 0.3, "sigma": 0.4},
        description="chain of quadratically-stiff oscillators, free ends",
        moment_defaults=lambda p: {
            "r": 3, "T": 1.0,
            "mean0": _coupled_init_mean(int(p["n_osc"])),
            "cov0": np.diag([0.0225] * (2 * int(p["n_osc"]))).tolist(),
        },
        filter_defaults=lambda p: {
            "obs_indices": list(range(0, int(p["n_osc"]), 2)),
            "obs_var": 0.09, "dt_pred": 0.15, "n_cycles": 25,
            "init_mean": _coupled_init_mean(int(p["n_osc"])),
            "init_cov_diag": [0.0225] * (2 * int(p["n_osc"])),
        },
    ),
    "double_well": SystemSpec(
        name="double_well",
        build=_make_double_well,
        params={"sigma": 0.5},
        description="2-D quartic double well started near the hilltop",
        moment_defaults=lambda p: {
            "r": 4, "T": 3.0, "mean0": [0.0, 0.0], "cov0": [[0.04, 0.0], [0.0, 0.04]],
        },
        filter_defaults=lambda p: {
            "obs_indices": [0, 1], "obs_var": 0.09, "dt_pred": 0.2, "n_cycles": 15,
            "init_mean": [0.0, 0.0], "init_cov_diag": [0.04, 0.04],
        },
    ),
    "tracer_3d": SystemSpec(
        name="tracer_3d",
        build=_make_tracer,
        params={"eps": 0.2, "omega": 1.0, "alpha": 0.5, "kappa": 0.05},
        description="3-D incompressible tracer flow with quadratic vertical forcing",
        moment_defaults=lambda p: {
            "r": 4, "T": 1.0, "mean0": [0.0, 0.0, 0.5],
            "cov0": np.diag([0.0025] * 3).tolist(),
        },
        filter_defaults=lambda p: {
            "obs_indices": [0, 1], "obs_var": 0.04, "dt_pred": 0.2, "n_cycles": 25,
            "init_mean": [0.0, 0.0, 0.5], "init_cov_diag": [0.0025] * 3,
        },
    ),
}


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Resolved experiment description; serializes to/from JSON."""

    kind: str
    system: str
    system_params: dict = field(default_factory=dict)
    # None means "use the registered per-system default, then the global one"
    r: int = None
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    dt_ode: float = 0.005
    # moment runs
    T: float = None
    window: float = 0.1
    mean0: list = None
    cov0: list = None
    mc_paths: int = 100_000
    mc_dt: float = 0.001
    compare_degree: int = None
    # filter runs
    obs_indices: list = None
    obs_var: float = None
    dt_pred: float = None
    n_cycles: int = None
    init_mean: list = None
    init_cov_diag: list = None
    sim_dt: float = 0.001
    particles: int = 10_000
    ensemble: int = 500
    filters: list = field(default_factory=lambda: ["skf", "ekf", "ukf", "enkf", "pf"])
    active_closure: bool = False
    # cone-cbf runs
    sigma: float = 0.5
    kappa_cbf: float = 6.0
    divergence_r: list = field(default_factory=lambda: [4, 6])
    init_std: float = 0.2

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")


def resolve_config(cfg):
    """Fill unset fields from the named system's registered defaults."""
    if cfg.system not in SYSTEMS and cfg.kind != "cone_cbf":
        raise KeyError(f"unknown system {cfg.system!r}; see `systems list`")
    if cfg.kind == "cone_cbf":
        if cfg.T is None:
            cfg.T = 3.0
        return cfg
    spec = SYSTEMS[cfg.system]
    defaults = {}
    if cfg.kind == "moments" and spec.moment_defaults:
        defaults = spec.moment_defaults({**spec.params, **cfg.system_params})
    elif cfg.kind == "filter" and spec.filter_defaults:
        defaults = spec.filter_defaults({**spec.params, **cfg.system_params})
    for key, val in defaults.items():
        if key == "system_params":
            merged = dict(val)
            merged.update(cfg.system_params)
            cfg.system_params = merged
        elif getattr(cfg, key, None) is None:
            setattr(cfg, key, val)
    fallbacks = {"r": 4, "T": 1.0, "obs_var": 0.04, "dt_pred": 0.2, "n_cycles": 25}
    for key, val in fallbacks.items():
        if getattr(cfg, key) is None:
            setattr(cfg, key, val)
    if cfg.kind == "moments":
        if cfg.mean0 is None or cfg.cov0 is None:
            raise ValueError(f"moment run for {cfg.system!r} needs mean0 and cov0")
        if cfg.compare_degree is None:
            cfg.compare_degree = min(cfg.r, 4)
    if cfg.kind == "filter":
        missing = [k for k in ("obs_indices", "init_mean", "init_cov_diag")
                   if getattr(cfg, k) is None]
        if missing:
            raise ValueError(f"filter run for {cfg.system!r} needs {', '.join(missing)}")
    return cfg


# ---------------------------------------------------------------------------
# experiment runners
# ---------------------------------------------------------------------------


def per_degree_errors(est, ref, max_degree, se=None):
    """Per-degree RMS scaled error |est - ref| / max(|ref|, tau_d).

    tau_d is the RMS reference magnitude at degree d, which keeps
    near-zero entries (odd moments of near-symmetric laws) from producing
    spurious relative errors. Degree 1 compares raw means; degrees >= 2
    compare moments centered about each trajectory's own mean. When `se`
    (per-entry standard errors of ref, raw-moment scale) is given, returns
    (errors, se_budget) where se_budget holds the same RMS aggregation of
    the scaled standard errors, usable as a noise allowance.
    """
    est_c = center_moments(est, est.mean())
    ref_c = center_moments(ref, ref.mean())
    errors, budget = {}, {}
    for d in range(1, max_degree + 1):
        idx = [k for k, a in enumerate(ref.basis.entries) if mi_degree(a) == d]
        ev, rv = (est, ref) if d == 1 else (est_c, ref_c)
        e = np.array([ev.values[k] for k in idx])
        m = np.array([rv.values[k] for k in idx])
        tau = max(float(np.sqrt(np.mean(m**2))), 1e-12)
        den = np.maximum(np.abs(m), tau)
        errors[d] = float(np.sqrt(np.mean(((e - m) / den) ** 2)))
        if se is not None:
            s = np.array([se[k] for k in idx])
            budget[d] = float(np.sqrt(np.mean((s / den) ** 2)))
    if se is not None:
        return errors, budget
    return errors


def _filter_config(cfg):
    closure = ClosureConfig(target_mode="active" if cfg.active_closure else "full_degree")
    return FilterConfig(r=cfg.r, dt_ode=cfg.dt_ode, closure=closure)


def run_moment_accuracy(cfg, out_dir=None, quiet=False):
    cfg = resolve_config(cfg)
    spec = SYSTEMS[cfg.system]
    sde, params = spec.make(cfg.system_params)
    fc = _filter_config(cfg)
    t0 = time.time()
    mean0, cov0 = np.array(cfg.mean0), np.array(cfg.cov0)
    n_win = max(1, int(round(cfg.T / cfg.window)))
    dt_win = cfg.T / n_win

    state = init_filter(mean0, cov0, fc)
    times = [0.0]
    est_traj = [state.raw_moments()]
    for _ in range(n_win):
        state = predict(state, sde, dt_win, fc)
        times.append(state.t)
        est_traj.append(state.raw_moments())
    est = est_traj[-1]

    # one Euler-Maruyama ensemble, sampled at the same window ends
    basis = enumerate_basis(sde.n, est.max_degree)
    rng = np.random.default_rng(cfg.seed)
    X = rng.multivariate_normal(mean0, np.atleast_2d(cov0), size=cfg.mc_paths)
    mc_traj = [sample_moments(X, basis)]
    sub = max(1, int(round(dt_win / cfg.mc_dt)))
    for _ in range(n_win):
        X = euler_maruyama(sde, X, dt_win / sub, sub, rng)
        mc_traj.append(sample_moments(X, basis))
    mc = mc_traj[-1]
    # batch standard errors matched to what each degree compares: raw moments
    # at degree 1, moments centered about the ensemble mean at degree >= 2
    splits = np.array_split(np.arange(cfg.mc_paths), 10)
    raw_b = np.stack([sample_moments(X[s], basis).values for s in splits])
    Xc = X - X.mean(axis=0)
    cen_b = np.stack([sample_moments(Xc[s], basis).values for s in splits])
    se_raw = raw_b.std(axis=0, ddof=1) / np.sqrt(len(splits))
    se_cen = cen_b.std(axis=0, ddof=1) / np.sqrt(len(splits))
    degs = np.array([mi_degree(a) for a in basis.entries])
    se = np.where(degs <= 1, se_raw, se_cen)

    errors, se_budget = per_degree_errors(est, mc, cfg.compare_degree, se=se)
    runtime = time.time() - t0
    result = {
        "kind": "moments",
        "system": cfg.system,
        "system_params": params,
        "per_degree_rel_rms": errors,
        "per_degree_se_budget": se_budget,
        "runtime_s": runtime,
        "times": times,
        "estimate_trajectory": est_traj,
        "reference_trajectory": mc_traj,
        "estimate": est,
        "reference": mc,
        "reference_se": se,
    }
    if not quiet:
        for d, e in errors.items():
            print(f"degree {d}: scaled RMS error {e:.4e} (MC se budget {se_budget[d]:.1e})")
        print(f"runtime: {runtime:.1f}s")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"moments_{cfg.system}.csv"
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["time", "form", "alpha", "degree", "estimate", "mc",
                        "mc_se_final", "abs_err"])
            for t, ev, mv in zip(times, est_traj, mc_traj):
                ev_c = center_moments(ev, ev.mean())
                mv_c = center_moments(mv, mv.mean())
                for form, evx, mvx in (("raw", ev, mv), ("centered", ev_c, mv_c)):
                    for k, a in enumerate(mc.basis.entries):
                        d = mi_degree(a)
                        if d == 0 or d > cfg.compare_degree or (form == "centered" and d < 2):
                            continue
                        w.writerow([f"{t:.6f}", form, " ".join(map(str, a)), d,
                                    f"{evx.values[k]:.10e}", f"{mvx.values[k]:.10e}",
                                    f"{se[k]:.3e}",
                                    f"{abs(evx.values[k] - mvx.values[k]):.3e}"])
        _write_summary(out, cfg, {k: v for k, v in result.items()
                                  if k in ("kind", "system", "system_params",
                                           "per_degree_rel_rms", "per_degree_se_budget",
                                           "runtime_s")})
    return result


def _make_measurement(cfg, n):
    idx = list(cfg.obs_indices)
    C = np.zeros((len(idx), n))
    for row, i in enumerate(idx):
        C[row, i] = 1.0
    R = cfg.obs_var * np.eye(len(idx))
    return MeasurementModel.linear(C, R)


# fixed ids keep the per-(seed, filter) streams independent of list order
_FILTER_IDS = {"skf": 0, "ekf": 1, "ukf": 2, "enkf": 3, "pf": 4}


def _run_one_filter(name, cfg, sde, model, truth, obs, rng):
    """One filter against one simulated trajectory.

    Returns (per-step errors, per-step mean estimates)."""
    mean0 = np.array(cfg.init_mean, dtype=float)
    cov0 = np.diag(cfg.init_cov_diag)
    means = []
    if name == "skf":
        fc = _filter_config(cfg)
        state = init_filter(mean0, cov0, fc)
        for k in range(cfg.n_cycles):
            state = predict(state, sde, cfg.dt_pred, fc)
            state = update_step(state, model, obs[k], fc)
            means.append(estimate(state)[0])
    elif name in ("ekf", "ukf"):
        step = ekf_step if name == "ekf" else ukf_step
        belief = GaussianBelief(mean0.copy(), cov0.copy())
        for k in range(cfg.n_cycles):
            belief = step(belief, sde, model, obs[k], cfg.dt_pred, cfg.dt_ode)
            means.append(belief.mean.copy())
    elif name == "enkf":
        ens = enkf_init(mean0, cov0, cfg.ensemble, rng)
        for k in range(cfg.n_cycles):
            ens = enkf_step(ens, sde, model, obs[k], cfg.dt_pred, cfg.dt_ode, rng)
            means.append(ens.mean(axis=0))
    elif name == "pf":
        particles, weights = pf_init(mean0, cov0, cfg.particles, rng)
        for k in range(cfg.n_cycles):
            particles, weights, _ = pf_step(
                particles, weights, sde, model, obs[k], cfg.dt_pred, cfg.dt_ode, rng
            )
            means.append(pf_estimate(particles, weights))
    else:
        raise KeyError(f"unknown filter {name!r}")
    means = np.array(means)
    errs = np.linalg.norm(means - np.array(truth), axis=1)
    if not np.all(np.isfinite(errs)):
        raise FloatingPointError("non-finite state estimate")
    return errs, means


def run_filter_comparison(cfg, out_dir=None, quiet=False):
    cfg = resolve_config(cfg)
    spec = SYSTEMS[cfg.system]
    sde, params = spec.make(cfg.system_params)
    n = sde.n
    model = _make_measurement(cfg, n)
    t0 = time.time()
    rows = []
    step_rows = []
    rmse = {f: [] for f in cfg.filters}
    failures = {f: 0 for f in cfg.filters}
    for seed in cfg.seeds:
        rng = np.random.default_rng(seed)
        x = rng.multivariate_normal(np.array(cfg.init_mean), np.diag(cfg.init_cov_diag))
        truth, obs = [], []
        sub = max(1, int(round(cfg.dt_pred / cfg.sim_dt)))
        for _ in range(cfg.n_cycles):
            x = euler_maruyama(sde, x, cfg.dt_pred / sub, sub, rng)
            truth.append(x.copy())
            noise = rng.multivariate_normal(np.zeros(model.R.shape[0]), model.R)
            obs.append(model.observe(x) + noise)
        for name in cfg.filters:
            # independent, reproducible stream per (seed, filter)
            frng = np.random.default_rng([seed, _FILTER_IDS[name]])
            try:
                errs, means = _run_one_filter(name, cfg, sde, model, truth, obs, frng)
                val = float(errs.mean())
                rmse[name].append(val)
                rows.append({"seed": seed, "filter": name, "rmse": val, "failed": 0})
                for k in range(cfg.n_cycles):
                    step_rows.append((k + 1, (k + 1) * cfg.dt_pred, name, seed,
                                      errs[k], means[k]))
            except (SkfError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
                failures[name] += 1
                rows.append({"seed": seed, "filter": name, "rmse": float("nan"),
                             "failed": 1, "error": type(exc).__name__})
                if not quiet:
                    print(f"seed {seed}: {name} failed ({type(exc).__name__}: {exc})")
    summary = {}
    for name in cfg.filters:
        vals = np.array(rmse[name])
        summary[name] = {
            "mean_rmse": float(vals.mean()) if vals.size else float("nan"),
            "std_rmse": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
            "n_runs": int(vals.size),
            "n_failures": failures[name],
        }
    runtime = time.time() - t0
    result = {
        "kind": "filter",
        "system": cfg.system,
        "system_params": params,
        "summary": summary,
        "runs": rows,
        "runtime_s": runtime,
    }
    if not quiet:
        for name, s in summary.items():
            print(f"{name:6s} rmse {s['mean_rmse']:.4f} +/- {s['std_rmse']:.4f} "
                  f"({s['n_runs']} runs, {s['n_failures']} failures)")
        print(f"runtime: {runtime:.1f}s")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / f"filter_{cfg.system}.csv").open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "time", "filter", "seed", "rmse"]
                       + [f"x{i}" for i in range(n)])
            for step, t, name, seed, err, mean in step_rows:
                w.writerow([step, f"{t:.6f}", name, seed, f"{err:.8e}"]
                           + [f"{v:.8e}" for v in mean])
        _write_summary(out, cfg, {k: v for k, v in result.items() if k != "runs"})
    return result


def divergence_time(r, cfg):
    """Run the unconstrained 2-D double-well closure until it diverges.

    Returns the divergence time, or None if the horizon was reached."""
    from .errors import DivergedClosure

    spec = SYSTEMS["double_well"]
    sde, _ = spec.make({"sigma": cfg.sigma})
    fc = FilterConfig(r=r, dt_ode=cfg.dt_ode)
    var = cfg.init_std**2
    state = init_filter(np.zeros(2), var * np.eye(2), fc)
    n_win = max(1, int(round(cfg.T / cfg.window)))
    try:
        for _ in range(n_win):
            state = predict(state, sde, cfg.T / n_win, fc)
    except DivergedClosure as exc:
        return float(exc.t)
    except (SkfError, np.linalg.LinAlgError, ValueError):
        return float(state.t)
    return None


def run_cone_cbf(cfg, out_dir=None, quiet=False):
    """Divergence study plus the constrained closure rescue, with MC check."""
    t0 = time.time()
    div = {}
    for r in cfg.divergence_r:
        div[str(r)] = divergence_time(int(r), cfg)
        if not quiet:
            t_star = div[str(r)]
            msg = f"t* = {t_star:.3f}" if t_star is not None else "no divergence"
            print(f"unconstrained closure, degree {r}: {msg}")

    theta = calibrate_theta_inf(cfg.sigma, cfg.kappa_cbf)
    var = cfg.init_std**2
    s = np.array([var, 3.0 * var**2, 15.0 * var**3])  # Gaussian even moments
    A, B, c = dw_affine_system(cfg.sigma)
    steps = max(1, int(round(cfg.T / cfg.dt_ode)))
    h = cfg.T / steps
    traj = [(0.0, *s, np.nan, np.nan, np.nan, s[0] * s[2] - s[1] ** 2)]
    n_clamped = 0
    min_g = np.inf

    def rhs(sv):
        nonlocal n_clamped
        st = ConeCbf1dState(sv[0], sv[1], sv[2], cfg.sigma, cfg.kappa_cbf, theta)
        u, clamped = cone_cbf_closure_1d(st)
        if clamped:
            n_clamped += 1
        return A @ sv + B * u + c, u

    for k in range(steps):
        k1, u1 = rhs(s)
        k2, _ = rhs(s + 0.5 * h * k1)
        k3, _ = rhs(s + 0.5 * h * k2)
        k4, _ = rhs(s + h * k3)
        s = s + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        g = s[0] * s[2] - s[1] ** 2
        min_g = min(min_g, g)
        if (k + 1) % max(1, steps // 300) == 0 or k == steps - 1:
            L = hankel_lower_bound(*s)
            U = cbf_upper_bound(*s, cfg.sigma, cfg.kappa_cbf)
            traj.append(((k + 1) * h, *s, u1, L, U, g))

    # Monte-Carlo reference for the 1-D marginal
    rng = np.random.default_rng(cfg.seed)
    X = rng.standard_normal(cfg.mc_paths) * cfg.init_std
    mc_steps = max(1, int(round(cfg.T / cfg.mc_dt)))
    dtm = cfg.T / mc_steps
    sq = np.sqrt(dtm)
    for _ in range(mc_steps):
        X = X + (X - X**3) * dtm + cfg.sigma * sq * rng.standard_normal(cfg.mc_paths)
    mc = np.array([np.mean(X**2), np.mean(X**4), np.mean(X**6)])
    rel = np.abs(s - mc) / np.abs(mc)
    runtime = time.time() - t0
    result = {
        "kind": "cone_cbf",
        "theta_inf": theta,
        "divergence_times": div,
        "terminal": {"m2": s[0], "m4": s[1], "m6": s[2]},
        "mc": {"m2": mc[0], "m4": mc[1], "m6": mc[2]},
        "rel_err": {"m2": float(rel[0]), "m4": float(rel[1]), "m6": float(rel[2])},
        "max_rel_err": float(rel.max()),
        "rms_rel_err": float(np.sqrt(np.mean(rel**2))),
        "min_barrier": float(min_g),
        "n_clamped": n_clamped,
        "runtime_s": runtime,
    }
    if not quiet:
        print(f"theta_inf = {theta:.4f}")
        print(f"terminal (m2, m4, m6) = ({s[0]:.4f}, {s[1]:.4f}, {s[2]:.4f})")
        print(f"MC       (m2, m4, m6) = ({mc[0]:.4f}, {mc[1]:.4f}, {mc[2]:.4f})")
        print(f"max relative error {rel.max():.3e}; min barrier {min_g:.3e}; "
              f"{n_clamped} clamped substeps")
        print(f"runtime: {runtime:.1f}s")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "cone_cbf_trajectory.csv").open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t", "m2", "m4", "m6", "u", "lower", "upper", "barrier"])
            for row in traj:
                w.writerow([f"{v:.8e}" if v == v else "" for v in row])
        _write_summary(out, cfg, result)
    return result


def _write_summary(out, cfg, payload):
    from . import __version__

    summary = {"version": __version__, "config": json.loads(cfg.to_json())}
    summary.update(payload)
    (Path(out) / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", type=str, default=None, help="JSON config path")
    p.add_argument("--system", type=str, default=None)
    p.add_argument("--r", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", type=str, default=None)
    p.add_argument("--quiet", action="store_true")


def _build_config(args, kind):
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        cfg.kind = kind
    else:
        if not getattr(args, "system", None) and kind != "cone_cbf":
            print("error: need --config or --system", file=sys.stderr)
            raise SystemExit(2)
        cfg = ExperimentConfig(kind=kind, system=getattr(args, "system", None) or "double_well")
    for name in ("system", "r", "seed", "out_dir"):
        val = getattr(args, name.replace("-", "_"), None)
        if val is not None and name != "out_dir":
            setattr(cfg, name, val)
    for name in ("T", "mc_paths", "particles", "n_cycles", "sigma"):
        val = getattr(args, name.lower(), None) if hasattr(args, name.lower()) else None
        if val is not None:
            setattr(cfg, name, val)
    if getattr(args, "seeds", None) is not None:
        cfg.seeds = list(range(args.seeds))
    if getattr(args, "active_closure", False):
        cfg.active_closure = True
    return cfg


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="skf-bench",
        description="moment-filtering benchmarks: moment accuracy, filtering, closure studies",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sys = sub.add_parser("systems", help="named benchmark systems")
    p_sys.add_argument("action", choices=["list"])

    p_mom = sub.add_parser("moments", help="moment propagation accuracy vs Monte Carlo")
    p_mom.add_argument("action", choices=["run"])
    _add_common(p_mom)
    p_mom.add_argument("--T", dest="t", type=float, default=None)
    p_mom.add_argument("--mc-paths", dest="mc_paths", type=int, default=None)

    p_fil = sub.add_parser("filter", help="filtering comparison against baselines")
    p_fil.add_argument("action", choices=["run"])
    _add_common(p_fil)
    p_fil.add_argument("--seeds", type=int, default=None, help="number of seeds (0..k-1)")
    p_fil.add_argument("--particles", type=int, default=None)
    p_fil.add_argument("--n-cycles", dest="n_cycles", type=int, default=None)
    p_fil.add_argument("--active-closure", action="store_true")

    p_cnt = sub.add_parser("counts", help="closure system row/unknown counts")
    p_cnt.add_argument("n", type=int)
    p_cnt.add_argument("r", type=int)
    p_cnt.add_argument("--mode", choices=["standard", "extended", "first_layer", "all"],
                       default="all")

    p_cbf = sub.add_parser("cone-cbf", help="double-well divergence and constrained closure")
    p_cbf.add_argument("action", choices=["run"])
    _add_common(p_cbf)
    p_cbf.add_argument("--sigma", type=float, default=None)
    p_cbf.add_argument("--T", dest="t", type=float, default=None)

    args = parser.parse_args(argv)

    try:
        if args.command == "systems":
            for name, spec in SYSTEMS.items():
                print(f"{name:22s} {spec.description}")
                print(f"{'':22s}   defaults: {spec.params}")
            return 0
        if args.command == "counts":
            modes = ["standard", "extended", "first_layer"] if args.mode == "all" else [args.mode]
            print(f"{'mode':>12s} {'rows':>12s} {'unknowns':>12s} {'ratio':>8s}")
            for mode in modes:
                rows, unk, ratio = count_system(args.n, args.r, mode)
                print(f"{mode:>12s} {rows:>12d} {unk:>12d} {ratio:>8.3f}")
            return 0
        if args.command == "moments":
            cfg = _build_config(args, "moments")
            if getattr(args, "t", None) is not None:
                cfg.T = args.t
            run_moment_accuracy(cfg, out_dir=args.out_dir, quiet=args.quiet)
            return 0
        if args.command == "filter":
            cfg = _build_config(args, "filter")
            if args.particles is not None:
                cfg.particles = args.particles
            if args.n_cycles is not None:
                cfg.n_cycles = args.n_cycles
            run_filter_comparison(cfg, out_dir=args.out_dir, quiet=args.quiet)
            return 0
        if args.command == "cone-cbf":
            cfg = _build_config(args, "cone_cbf")
            if getattr(args, "sigma", None) is not None:
                cfg.sigma = args.sigma
            if getattr(args, "t", None) is not None:
                cfg.T = args.t
            run_cone_cbf(cfg, out_dir=args.out_dir, quiet=args.quiet)
            return 0
    # numerical failures exit 2 with a diagnostic dump, configuration problems
    # exit 1; the numerical tuple is checked first because a missing-moment
    # error subclasses both SkfError and KeyError
    except (SkfError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        traceback.print_exc(file=sys.stderr)
        return 2
    except (KeyError, ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
