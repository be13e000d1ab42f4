"""Numerical checks of the PDE, stochastic-calculus and sampler identities.

PDE residuals are evaluated on :class:`Grid1D` with exact oracle densities:
time derivatives by a five-point central difference in ``t`` and spatial
derivatives by fourth-order central stencils, using two ghost points on each
side so every grid point gets the full stencil. Monte Carlo checks return a
z-score against a closed-form reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy import integrate

from . import oracle
from ._rng import make_rng
from .errors import ConfigError
from .fields import FieldModel, to_noise
from .samplers import ddim_step
from .schedule import DiscreteSchedule, NoiseSchedule

MIN_POINTS = 64
TIME_STEP = 1e-4
DENSITY_FLOOR = 1e-300


@dataclass(frozen=True)
class Grid1D:
    """Uniform points on ``[lo, hi]``."""

    xs: np.ndarray
    dx: float
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.xs.size < MIN_POINTS:
            raise ConfigError(f"grid needs at least {MIN_POINTS} points, got {self.xs.size}")
        if not self.dx > 0:
            raise ConfigError("grid spacing must be positive")
        if self.values is not None and np.any(np.asarray(self.values) < 0):
            raise ConfigError("density values must be nonnegative")

    @classmethod
    def uniform(cls, lo: float, hi: float, n: int) -> "Grid1D":
        if n < MIN_POINTS:
            raise ConfigError(f"grid needs at least {MIN_POINTS} points, got {n}")
        xs = np.linspace(lo, hi, n)
        return cls(xs, float(xs[1] - xs[0]))

    def refined(self) -> "Grid1D":
        """Same interval with the spacing halved."""
        return Grid1D.uniform(self.xs[0], self.xs[-1], 2 * self.xs.size - 1)

    def padded(self, ghosts: int = 2) -> np.ndarray:
        return self.xs[0] + self.dx * np.arange(-ghosts, self.xs.size + ghosts)


def truncation_grid(mix: oracle.GaussianMixture, sched: NoiseSchedule, t: float,
                    n: int = 1024, n_std: float = 6.0) -> Grid1D:
    """Grid spanning ``n_std`` standard deviations of the widest marginal component."""
    a, s = float(sched.alpha(t)), float(sched.sigma(t))
    std = float(np.sqrt(np.max(a * a * mix.variances + s * s)))
    centers = a * mix.means[:, 0]
    return Grid1D.uniform(centers.min() - n_std * std, centers.max() + n_std * std, n)


@dataclass(frozen=True)
class ResidualReport:
    sup_norm: float
    l2_norm: float
    meta: dict = field(default_factory=dict)
    residual: np.ndarray | None = None

    def __post_init__(self):
        if not (np.isfinite(self.sup_norm) and np.isfinite(self.l2_norm)):
            raise ConfigError("residual norms are not finite")


def _d1(f, dx):
    return (f[:-4] - 8 * f[1:-3] + 8 * f[3:-1] - f[4:]) / (12 * dx)


def _d2(f, dx):
    return (-f[:-4] + 16 * f[1:-3] - 30 * f[2:-2] + 16 * f[3:-1] - f[4:]) / (12 * dx * dx)


def _dt(fn: Callable[[float], np.ndarray], t: float, step: float = TIME_STEP):
    return (fn(t - 2 * step) - 8 * fn(t - step) + 8 * fn(t + step) - fn(t + 2 * step)) / (
        12 * step)


def _density(mix, sched, t, xs):
    p = np.exp(oracle.marginal_logpdf(mix, sched, t, xs[:, None]))
    return np.where(p < DENSITY_FLOOR, 0.0, p)


def _report(residual, grid: Grid1D, **meta) -> ResidualReport:
    return ResidualReport(float(np.max(np.abs(residual))),
                          float(np.sqrt(np.sum(residual**2) * grid.dx)),
                          {"points": int(grid.xs.size), "dx": grid.dx, **meta}, residual)


def _require_1d(mix):
    if mix.dim != 1:
        raise ConfigError("PDE residuals are implemented on one-dimensional mixtures")


def continuity_residual(mix, sched: NoiseSchedule, t: float, grid: Grid1D) -> ResidualReport:
    """``d_t p + d_x(p u)`` with ``u`` the probability-flow velocity."""
    _require_1d(mix)
    xs = grid.padded()
    p = _density(mix, sched, t, xs)
    u = oracle.marginal_velocity(mix, sched, t, xs[:, None])[:, 0]
    dp_dt = _dt(lambda s: _density(mix, sched, s, grid.xs), t)
    return _report(dp_dt + _d1(p * u, grid.dx), grid, check="continuity", t=t)


def _fp_terms(mix, sched, t, grid):
    xs = grid.padded()
    p = _density(mix, sched, t, xs)
    dd = sched.drift_diffusion(t)
    flux = float(dd.f) * xs * p
    return _d1(flux, grid.dx), 0.5 * float(dd.g2) * _d2(p, grid.dx)


def fokker_planck_residual(mix, sched: NoiseSchedule, t: float,
                           grid: Grid1D) -> ResidualReport:
    """``d_t p + d_x(f x p) - g^2/2 d_xx p`` for the forward marginal."""
    _require_1d(mix)
    drift, diffusion = _fp_terms(mix, sched, t, grid)
    dp_dt = _dt(lambda s: _density(mix, sched, s, grid.xs), t)
    return _report(dp_dt + drift - diffusion, grid, check="fokker-planck", t=t)


def reverse_pde_residual(mix, sched: NoiseSchedule, tau: float,
                         grid: Grid1D) -> ResidualReport:
    """Backward-time density ``q_tau = p_{1-tau}`` against
    ``d_tau q = d_x(f_{1-tau} x q) - g^2_{1-tau}/2 d_xx q``."""
    _require_1d(mix)
    t = 1.0 - tau
    drift, diffusion = _fp_terms(mix, sched, t, grid)
    dq_dtau = _dt(lambda s: _density(mix, sched, 1.0 - s, grid.xs), tau)
    return _report(dq_dtau - (drift - diffusion), grid, check="reverse-pde", tau=tau)


def conditional_fp_residual(sched: NoiseSchedule, t: float, x0: float,
                            grid: Grid1D) -> ResidualReport:
    """Forward equation for the Gaussian kernel ``p_t(x | x0)`` with analytic derivatives."""
    xs = grid.xs
    a, s = float(sched.alpha(t)), float(sched.sigma(t))
    a_dot, s_dot = float(sched.alpha_dot(t)), float(sched.sigma_dot(t))
    mean, var = a * x0, s * s
    mean_dot, var_dot = a_dot * x0, 2 * s * s_dot
    c = xs - mean
    p = np.exp(-0.5 * c * c / var) / np.sqrt(2 * np.pi * var)
    dp_dt = p * (-0.5 * var_dot / var + c * mean_dot / var + 0.5 * c * c * var_dot / var**2)
    dp_dx = -p * c / var
    d2p = p * (c * c / var**2 - 1.0 / var)
    dd = sched.drift_diffusion(t)
    f, g2 = float(dd.f), float(dd.g2)
    rhs = -(f * p + f * xs * dp_dx) + 0.5 * g2 * d2p
    return _report(dp_dt - rhs, grid, check="conditional-fp", t=t, x0=x0)


def convergence_ratio(residual_fn: Callable[[Grid1D], ResidualReport], grid: Grid1D) -> float:
    """L2 residual on ``grid`` divided by the L2 residual on the refined grid."""
    coarse = residual_fn(grid).l2_norm
    fine = residual_fn(grid.refined()).l2_norm
    return coarse / fine if fine > 0 else float("inf")


def averaged_drift_residual(mix, sched: NoiseSchedule, t: float, grid: Grid1D,
                            nodes: int = 80) -> tuple[float, ResidualReport, ResidualReport]:
    """Continuity residual with the flux built by averaging conditional velocities.

    The averaged flux ``sum_m w_m int N(x; alpha x0, sigma^2) N(x0; mu_m, v_m) u(x|x0) dx0``
    is integrated by Gauss-Hermite quadrature over ``x0`` and compared with the
    direct flux ``p_t u_t``. Returns ``(max |difference of residuals|, averaged, direct)``.
    """
    _require_1d(mix)
    xs = grid.padded()
    a, s = float(sched.alpha(t)), float(sched.sigma(t))
    z, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / np.sqrt(2 * np.pi)
    flux = np.zeros_like(xs)
    for weight, mu, var in zip(mix.weights, mix.means[:, 0], mix.variances):
        x0 = mu + np.sqrt(var) * z  # (nodes,)
        kernel = np.exp(-0.5 * (xs[:, None] - a * x0) ** 2 / (s * s)) / np.sqrt(2 * np.pi * s * s)
        u = oracle.conditional_velocity(sched, t, xs[:, None, None],
                                        x0[None, :, None])[..., 0]
        flux += weight * np.sum(w * kernel * u, axis=1)
    dp_dt = _dt(lambda r: _density(mix, sched, r, grid.xs), t)
    averaged = _report(dp_dt + _d1(flux, grid.dx), grid, check="averaged-drift", t=t)
    direct = continuity_residual(mix, sched, t, grid)
    diff = float(np.max(np.abs(averaged.residual - direct.residual)))
    return diff, averaged, direct


# Monte Carlo identities.

class McResult(NamedTuple):
    estimate: np.ndarray
    reference: np.ndarray
    z_score: float


def _z(diff, se):
    diff, se = np.atleast_1d(diff), np.atleast_1d(se)
    z = np.where(se > 0, diff / np.where(se > 0, se, 1.0),
                 np.where(diff == 0, 0.0, np.inf))
    return float(np.max(np.abs(z)))


def fisher_check(mix, sched: NoiseSchedule, t: float, x, n_draws: int = 100_000,
                 rng=0) -> McResult:
    """Posterior average of conditional scores against the marginal score at ``x``.

    Draws ``X0 | X_t = x`` exactly and averages ``grad log p_t(x | X0)``; the
    z-score is the largest coordinate-wise ``|estimate - reference| / SE``.
    """
    if n_draws < 1000:
        raise ConfigError("fisher_check needs at least 1000 draws")
    x = np.asarray(x, dtype=float).reshape(mix.dim)
    x0 = oracle.sample_posterior_x0(mix, sched, t, x, n_draws, rng)
    scores = oracle.conditional_score(sched, t, np.broadcast_to(x, x0.shape), x0)
    est = scores.mean(axis=0)
    se = scores.std(axis=0, ddof=1) / np.sqrt(n_draws)
    ref = oracle.marginal_score(mix, sched, t, x)
    return McResult(est, ref, _z(est - ref, se))


class ItoResult(NamedTuple):
    sample_var: float
    target_var: float
    z_score: float
    skewness: float
    excess_kurtosis: float
    jarque_bera: float


def ito_isometry_check(phi: Callable, interval: tuple[float, float], n_paths: int = 100_000,
                       n_substeps: int = 256, rng=0) -> ItoResult:
    """Simulates ``int phi dW`` by Riemann-Ito sums and compares its variance to ``int phi^2``.

    ``phi`` is deterministic, so evaluating it at substep midpoints changes no
    stochastic property and removes the first-order quadrature bias. The
    standard error of the sample variance of Gaussian data is
    ``target * sqrt(2 / (n - 1))``.
    """
    if n_substeps < 128:
        raise ConfigError("ito_isometry_check needs at least 128 substeps")
    lo, hi = map(float, interval)
    gen = make_rng(rng)
    dt = (hi - lo) / n_substeps
    mids = lo + dt * (np.arange(n_substeps) + 0.5)
    weights = np.broadcast_to(np.asarray(phi(mids), dtype=float), mids.shape)
    total = np.zeros(n_paths)
    for w in weights:
        total += w * gen.normal(0.0, np.sqrt(dt), size=n_paths)
    target = float(integrate.quad(lambda u: float(np.square(phi(u))), lo, hi,
                                  epsabs=1e-13, epsrel=1e-12, limit=200)[0])
    var = float(np.var(total, ddof=1))
    se = target * np.sqrt(2.0 / (n_paths - 1))
    centered = total - total.mean()
    m2 = np.mean(centered**2)
    if m2 > 0:
        skew = float(np.mean(centered**3) / m2**1.5)
        kurt = float(np.mean(centered**4) / m2**2 - 3.0)
    else:
        skew = kurt = 0.0
    jb = n_paths / 6.0 * (skew**2 + kurt**2 / 4.0)
    return ItoResult(var, target, _z(var - target, se), skew, kurt, float(jb))


class OrthogonalityResult(NamedTuple):
    total: float
    model_gap: float
    irreducible: float
    z_score: float


def orthogonality_check(mix, sched: NoiseSchedule, t: float, model: Callable,
                        n_draws: int = 100_000, rng=0) -> OrthogonalityResult:
    """``E||a - eps||^2 = E||a - E[eps|X_t]||^2 + E||eps - E[eps|X_t]||^2`` by Monte Carlo.

    ``model(x) -> a`` is any fixed function of the noisy sample. The z-score is
    the mean of the per-sample imbalance over its standard error.
    """
    gen = make_rng(rng)
    x0, _ = oracle.sample_data(mix, n_draws, gen)
    eps = gen.standard_normal(x0.shape)
    x = sched.alpha(t) * x0 + sched.sigma(t) * eps
    cond_mean = oracle.ideal_noise(mix, sched, t, x)
    a = np.asarray(model(x), dtype=float)
    lhs = np.sum((a - eps) ** 2, axis=-1)
    gap = np.sum((a - cond_mean) ** 2, axis=-1)
    irr = np.sum((eps - cond_mean) ** 2, axis=-1)
    imbalance = lhs - gap - irr
    se = imbalance.std(ddof=1) / np.sqrt(n_draws)
    return OrthogonalityResult(float(lhs.mean()), float(gap.mean()), float(irr.mean()),
                               _z(imbalance.mean(), se))


# Discrete-time identities.

def ode_first_order_step(ds: DiscreteSchedule, x, eps, k: int):
    """First-order reverse-ODE step written through the grid scales
    ``(alpha_{k-1}/alpha_k) x + (sigma_{k-1} - alpha_{k-1}/alpha_k sigma_k) eps``."""
    ratio = ds.alpha(k - 1) / ds.alpha(k)
    return ratio * x + (ds.sigma(k - 1) - ratio * ds.sigma(k)) * eps


def ddim_ode_equivalence(ds: DiscreteSchedule, model: FieldModel, k: int, x=None,
                         rng=0, batch: int = 64) -> float:
    """Max ``|DDIM(eta=0) step - first-order ODE step|`` on a probe batch."""
    if not 1 <= k <= ds.n_steps:
        raise IndexError(f"k={k} outside 1..{ds.n_steps}")
    if x is None:
        x = make_rng(rng).standard_normal((batch, model.dim)) * 2.0
    eps = _discrete_eps(model, ds, x, k)
    ddim, _ = ddim_step(ds, x, eps, k, 0.0)
    return float(np.max(np.abs(ddim - ode_first_order_step(ds, x, eps, k))))


def _discrete_eps(model, ds, x, k):
    if model.parameterization == "noise":
        return model(x, ds.grid[k])
    return to_noise(model, ds.schedule, x, ds.grid[k])


@dataclass(frozen=True)
class ExpansionTable:
    k: np.ndarray
    b_tilde: np.ndarray
    h: np.ndarray
    ratio: np.ndarray
    a_bar_prev: np.ndarray

    def interior(self, max_a_bar_prev: float = 0.5) -> np.ndarray:
        """Rows with ``a_bar_{k-1} <= max_a_bar_prev``: a fixed fraction of the signal
        has been noised, so ``1 - a_bar_{k-1}`` stays bounded away from 0 as the
        grid refines."""
        return self.a_bar_prev <= max_a_bar_prev

    def max_interior_ratio(self, max_a_bar_prev: float = 0.5) -> float:
        mask = self.interior(max_a_bar_prev)
        return float(np.max(self.ratio[mask])) if np.any(mask) else float("nan")


def ddpm_expansion_check(ds: DiscreteSchedule) -> ExpansionTable:
    """``|b_tilde_k - h_k| / h_k^2`` for ``k = 2..N`` (``k = 1`` is degenerate: ``b_tilde_1 = 0``)."""
    k = np.arange(2, ds.n_steps + 1)
    h, bt = ds.h[k], ds.b_tilde[k]
    return ExpansionTable(k, bt, h, np.abs(bt - h) / h**2, ds.a_bar[k - 1])


# Named check suite used by the command-line runner.

class CheckRow(NamedTuple):
    check: str
    statistic: float
    threshold: float
    passed: bool


CHECK_NAMES = ("continuity", "fp", "reverse-pde", "fisher", "ito", "ddim-ode",
               "ddpm-expansion", "orthogonality")
PDE_TIMES = (0.3, 0.5, 0.7)
FISHER_PROBES = tuple(np.linspace(-2.0, 2.0, 10))


def ito_integrands(sched: NoiseSchedule | None = None, n_grid: int = 10, k: int = 5):
    """Five deterministic integrands with their intervals.

    The last one is ``sqrt(beta(1 - tau))`` on ``[1 - t_k, 1 - t_{k-1}]``, whose
    squared integral is the integrated noise rate ``h_k`` of grid step ``k``.
    """
    from .schedule import vp_linear

    sched = sched or vp_linear()
    grid = np.linspace(0.0, 1.0, n_grid + 1)
    beta = sched.beta
    return [
        ("one", lambda u: np.ones_like(np.asarray(u, dtype=float)), (0.0, 1.0)),
        ("linear", lambda u: np.asarray(u, dtype=float), (0.0, 1.0)),
        ("sine", lambda u: np.sin(2 * np.pi * np.asarray(u, dtype=float)), (0.0, 1.0)),
        ("decay", lambda u: np.exp(-np.asarray(u, dtype=float)), (0.0, 2.0)),
        ("sqrt-beta", lambda u: np.sqrt(beta(1.0 - np.asarray(u, dtype=float))),
         (1.0 - grid[k], 1.0 - grid[k - 1])),
    ]


def orthogonality_models(mix, sched: NoiseSchedule, t: float):
    """Three fixed predictors of the noise from ``X_t``."""
    return [
        ("zero", lambda x: np.zeros_like(x)),
        ("half-ideal", lambda x: 0.5 * oracle.ideal_noise(mix, sched, t, x)),
        ("tanh", lambda x: np.tanh(x)),
    ]


def run_suite(names=CHECK_NAMES, mix=None, sched=None, seed: int = 0,
              n_points: int = 1024) -> list[CheckRow]:
    """Evaluate the named checks on a 1D labeled mixture (the two-mode benchmark by default)."""
    from .fields import oracle_noise_model
    from .samplers import ddim_sigma
    from .schedule import discretize, vp_constant

    mix = mix or oracle.benchmark_mixture()
    sched = sched or vp_constant(2.0)
    unknown = set(names) - set(CHECK_NAMES)
    if unknown:
        raise ConfigError(f"unknown checks {sorted(unknown)}; expected {CHECK_NAMES}")
    grid = Grid1D.uniform(-6.0, 6.0, n_points)
    rows: list[CheckRow] = []

    def add(name, stat, thr, ok):
        rows.append(CheckRow(name, float(stat), float(thr), bool(ok)))

    def pde(label, fn):
        for t in PDE_TIMES:
            rep = fn(t, grid)
            add(f"{label}@t={t}", rep.sup_norm, 1e-5, rep.sup_norm < 1e-5)
            ratio = convergence_ratio(lambda g: fn(t, g), grid)
            add(f"{label}-refinement@t={t}", ratio, 8.0, ratio >= 8.0)

    for name in names:
        if name == "continuity":
            pde("continuity", lambda t, g: continuity_residual(mix, sched, t, g))
            for t in PDE_TIMES:
                diff, _, _ = averaged_drift_residual(mix, sched, t, grid)
                add(f"averaged-drift@t={t}", diff, 1e-6, diff < 1e-6)
        elif name == "fp":
            pde("fokker-planck", lambda t, g: fokker_planck_residual(mix, sched, t, g))
            for t in PDE_TIMES:
                rep = conditional_fp_residual(sched, t, 1.0, grid)
                add(f"conditional-fp@t={t}", rep.sup_norm, 1e-6, rep.sup_norm < 1e-6)
        elif name == "reverse-pde":
            pde("reverse-pde", lambda t, g: reverse_pde_residual(mix, sched, 1.0 - t, g))
        elif name == "fisher":
            for i, x in enumerate(FISHER_PROBES):
                res = fisher_check(mix, sched, 0.5, x, 100_000, seed + i)
                add(f"fisher@x={x:.4g}", res.z_score, 3.0, res.z_score < 3.0)
        elif name == "ito":
            for i, (label, phi, interval) in enumerate(ito_integrands()):
                res = ito_isometry_check(phi, interval, 100_000, 256, seed + i)
                add(f"ito-{label}", res.z_score, 3.0, res.z_score < 3.0)
        elif name == "ddim-ode":
            ds = discretize(sched, 100)
            model = oracle_noise_model(mix, sched)
            gen = make_rng(seed)
            worst = max(ddim_ode_equivalence(ds, model, int(gen.integers(1, ds.n_steps + 1)),
                                             rng=gen, batch=8) for _ in range(100))
            add("ddim-ode-equivalence", worst, 1e-12, worst < 1e-12)
            gap = max(abs(ddim_sigma(ds, k, 1.0) - np.sqrt(ds.b_tilde[k]))
                      for k in range(1, ds.n_steps + 1))
            add("ddim-sigma-vs-posterior-std", gap, 1e-12, gap < 1e-12)
        elif name == "ddpm-expansion":
            for n in (100, 400, 1600):
                ds = discretize(vp_constant(1.0), n)
                worst = ddpm_expansion_check(ds).max_interior_ratio()
                add(f"ddpm-expansion@N={n}", worst, 2.0, worst <= 2.0)
                add(f"ddpm-final-variance@N={n}", ds.b_tilde[1], 0.0, ds.b_tilde[1] == 0.0)
        elif name == "orthogonality":
            for i, (label, fn) in enumerate(orthogonality_models(mix, sched, 0.5)):
                res = orthogonality_check(mix, sched, 0.5, fn, 100_000, seed + i)
                add(f"orthogonality-{label}", res.z_score, 3.0, res.z_score < 3.0)
    return rows
