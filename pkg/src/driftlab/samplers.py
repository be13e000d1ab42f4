"""Reverse-time samplers: Euler-Maruyama, Euler, Heun, DPM-Solver-1, DDPM, DDIM.

Continuous samplers walk a decreasing :class:`TimeGrid` ``t_N > ... > t_0 = EPS``
and freeze the field at the right endpoint ``t_n`` of each step. Discrete
samplers walk ``k = N..1`` of a :class:`~driftlab.schedule.DiscreteSchedule`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from ._rng import make_rng, seed_of
from .errors import GridError, UnsupportedError
from .fields import (
    NO_GUIDANCE,
    FieldModel,
    GuidanceSpec,
    effective_noise,
    reverse_ode_velocity,
    reverse_sde_drift,
)
from .schedule import DiscreteSchedule, NoiseSchedule

EPS = 1e-3


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly decreasing sampling times; ``deltas[n-1] = t_n - t_{n-1}``."""

    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise GridError("time grid needs at least two points")
        if np.any(np.diff(times) >= 0):
            raise GridError("time grid must be strictly decreasing")
        object.__setattr__(self, "times", times)

    @property
    def deltas(self) -> np.ndarray:
        return -np.diff(self.times)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    def steps(self):
        """Yield ``(t_n, t_{n-1})`` pairs from the top of the grid down."""
        return zip(self.times[:-1], self.times[1:])


def uniform_grid(n_steps: int, sched: NoiseSchedule | None = None, t_start: float = 1.0,
                 t_end: float = EPS) -> TimeGrid:
    """``n_steps`` equal steps from ``t_start`` down to ``t_end``.

    With a schedule, ``t_start`` is clamped into its evaluation domain.
    """
    if n_steps < 1:
        raise GridError("need at least one step")
    if sched is not None:
        t_start = min(t_start, sched.t_max)
        t_end = max(t_end, sched.t_min)
    return TimeGrid(np.linspace(t_start, t_end, n_steps + 1))


def power_grid(n_steps: int, sched: NoiseSchedule | None = None, power: float = 2.0,
               t_start: float = 1.0, t_end: float = EPS) -> TimeGrid:
    """Grid ``t_end + (t_start - t_end) u**power`` over equally spaced ``u``.

    ``power > 1`` concentrates steps near ``t_end`` where the score of a
    narrow-mode distribution changes fastest; ``power = 1`` is the uniform grid.
    """
    if power <= 0:
        raise GridError("power must be positive")
    base = uniform_grid(n_steps, sched, t_start, t_end).times
    t_start, t_end = base[0], base[-1]
    u = np.linspace(1.0, 0.0, n_steps + 1)
    return TimeGrid(t_end + (t_start - t_end) * u**power)


@dataclass(eq=False)
class Trajectory:
    """States of a sampling run; ``states[i]`` is the batch at ``times[i]``."""

    times: np.ndarray
    states: np.ndarray
    seed: int | None
    sampler_tag: dict = field(default_factory=dict)

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


class _Recorder:
    def __init__(self, x, t, record):
        self.record = record
        self.times = [t]
        self.states = [x.copy()]

    def push(self, x, t):
        if self.record:
            self.times.append(t)
            self.states.append(x.copy())
        else:
            self.times[-1:] = [t]
            self.states[-1:] = [x.copy()]

    def build(self, seed, tag):
        return Trajectory(np.asarray(self.times), np.stack(self.states), seed, tag)


def _initial(model: FieldModel, batch: int, rng, sigma_init: float, x_init):
    if x_init is not None:
        return np.array(x_init, dtype=float, copy=True)
    return sigma_init * rng.standard_normal((batch, model.dim))


def _tag(name, guidance: GuidanceSpec, **extra):
    tag = {"sampler": name, "guidance": guidance.mode}
    if guidance.mode == "classifier":
        tag["gamma"] = guidance.gamma
    if guidance.mode == "cfg":
        tag["s"] = guidance.s
    tag.update(extra)
    return tag


def em_reverse_sde(model: FieldModel, sched: NoiseSchedule, grid: TimeGrid, batch: int,
                   rng=0, *, guidance=NO_GUIDANCE, cond=None, sigma_init: float = 1.0,
                   x_init=None, record: bool = True) -> Trajectory:
    """Euler-Maruyama on the learned reverse SDE."""
    gen = make_rng(rng)
    x = _initial(model, batch, gen, sigma_init, x_init)
    rec = _Recorder(x, grid.times[0], record)
    for (tn, tm), dt in zip(grid.steps(), grid.deltas):
        drift = reverse_sde_drift(model, sched, x, tn, guidance, cond)
        g = np.sqrt(sched.drift_diffusion(tn).g2)
        z = gen.standard_normal(x.shape)
        x = x - drift * dt + g * np.sqrt(dt) * z
        rec.push(x, tm)
    return rec.build(seed_of(rng), _tag("em", guidance, steps=grid.n_steps))


def euler_reverse_ode(model: FieldModel, sched: NoiseSchedule, grid: TimeGrid, batch: int,
                      rng=0, *, guidance=NO_GUIDANCE, cond=None, sigma_init: float = 1.0,
                      x_init=None, record: bool = True) -> Trajectory:
    """Explicit first-order backward Euler on the probability-flow ODE."""
    gen = make_rng(rng)
    x = _initial(model, batch, gen, sigma_init, x_init)
    rec = _Recorder(x, grid.times[0], record)
    for (tn, tm), dt in zip(grid.steps(), grid.deltas):
        x = x - reverse_ode_velocity(model, sched, x, tn, guidance, cond) * dt
        rec.push(x, tm)
    return rec.build(seed_of(rng), _tag("euler", guidance, steps=grid.n_steps))


def heun_reverse_ode(model: FieldModel, sched: NoiseSchedule, grid: TimeGrid, batch: int,
                     rng=0, *, guidance=NO_GUIDANCE, cond=None, sigma_init: float = 1.0,
                     x_init=None, record: bool = True) -> Trajectory:
    """Heun predictor-corrector on the probability-flow ODE."""
    gen = make_rng(rng)
    x = _initial(model, batch, gen, sigma_init, x_init)
    rec = _Recorder(x, grid.times[0], record)
    for (tn, tm), dt in zip(grid.steps(), grid.deltas):
        k1 = reverse_ode_velocity(model, sched, x, tn, guidance, cond)
        x_pred = x - dt * k1
        k2 = reverse_ode_velocity(model, sched, x_pred, tm, guidance, cond)
        x = x - 0.5 * dt * (k1 + k2)
        rec.push(x, tm)
    return rec.build(seed_of(rng), _tag("heun", guidance, steps=grid.n_steps))


def dpm_solver1_step(x, eps, alpha_s, sigma_s, alpha_t, sigma_t):
    """One exponential-integrator step ``s -> t`` in log-SNR coordinates."""
    if sigma_t == 0.0:
        # sigma_t (e^h - 1) tends to alpha_t sigma_s / alpha_s as the target noise vanishes.
        return (alpha_t / alpha_s) * x - (alpha_t * sigma_s / alpha_s) * eps
    h = (np.log(alpha_t) - np.log(sigma_t)) - (np.log(alpha_s) - np.log(sigma_s))
    return (alpha_t / alpha_s) * x - sigma_t * np.expm1(h) * eps


def dpm_solver1(model: FieldModel, sched: NoiseSchedule, grid: TimeGrid, batch: int,
                rng=0, *, guidance=NO_GUIDANCE, cond=None, sigma_init: float = 1.0,
                x_init=None, record: bool = True) -> Trajectory:
    """First-order DPM-Solver: ``x_t = (a_t/a_s) x_s - sigma_t (e^h - 1) eps(x_s, s)``."""
    if not sched.lambda_monotone:
        raise UnsupportedError("DPM-Solver needs a monotone log-SNR schedule")
    gen = make_rng(rng)
    x = _initial(model, batch, gen, sigma_init, x_init)
    rec = _Recorder(x, grid.times[0], record)
    for s, t in grid.steps():
        eps = effective_noise(model, sched, x, s, guidance, cond)
        x = dpm_solver1_step(x, eps, sched.alpha(s), sched.sigma(s),
                             sched.alpha(t), sched.sigma(t))
        rec.push(x, t)
    return rec.build(seed_of(rng), _tag("dpm1", guidance, steps=grid.n_steps))


def _discrete_noise(model, ds: DiscreteSchedule, x, k, guidance, cond):
    return effective_noise(model, ds.schedule, x, ds.grid[k], guidance, cond)


def ddpm_mean(ds: DiscreteSchedule, x, eps, k: int):
    """``(x - b_k / sqrt(1 - a_bar_k) eps) / sqrt(a_k)``."""
    return (x - ds.b[k] / np.sqrt(1.0 - ds.a_bar[k]) * eps) / np.sqrt(ds.a[k])


def ddpm_ancestral(model: FieldModel, ds: DiscreteSchedule, batch: int, rng=0, *,
                   guidance=NO_GUIDANCE, cond=None, x_init=None,
                   record: bool = True) -> Trajectory:
    """Ancestral sampling of the learned discrete reverse chain."""
    gen = make_rng(rng)
    x = _initial(model, batch, gen, 1.0, x_init)
    rec = _Recorder(x, ds.grid[-1], record)
    for k in range(ds.n_steps, 0, -1):
        eps = _discrete_noise(model, ds, x, k, guidance, cond)
        x = ddpm_mean(ds, x, eps, k)
        if ds.b_tilde[k] > 0.0:
            x = x + np.sqrt(ds.b_tilde[k]) * gen.standard_normal(x.shape)
        rec.push(x, ds.grid[k - 1])
    return rec.build(seed_of(rng), _tag("ddpm", guidance, steps=ds.n_steps))


def predicted_x0(ds: DiscreteSchedule, x, eps, k: int):
    return (x - np.sqrt(1.0 - ds.a_bar[k]) * eps) / np.sqrt(ds.a_bar[k])


def ddim_sigma(ds: DiscreteSchedule, k: int, eta: float) -> float:
    """``eta * sqrt((1 - a_bar_{k-1}) / (1 - a_bar_k) * (1 - a_bar_k / a_bar_{k-1}))``."""
    if eta == 0.0:
        return 0.0
    ratio = (1.0 - ds.a_bar[k - 1]) / (1.0 - ds.a_bar[k])
    return eta * np.sqrt(ratio * (1.0 - ds.a_bar[k] / ds.a_bar[k - 1]))


def ddim_step(ds: DiscreteSchedule, x, eps, k: int, eta: float = 0.0, z=None):
    """One DDIM update; returns ``(x_{k-1}, clamped)``."""
    s_hat = ddim_sigma(ds, k, eta)
    x0_hat = predicted_x0(ds, x, eps, k)
    rad = 1.0 - ds.a_bar[k - 1] - s_hat * s_hat
    clamped = rad < 0.0
    out = np.sqrt(ds.a_bar[k - 1]) * x0_hat + np.sqrt(max(rad, 0.0)) * eps
    if s_hat > 0.0:
        out = out + s_hat * z
    return out, clamped


def ddim(model: FieldModel, ds: DiscreteSchedule, batch: int, eta: float = 0.0, rng=0, *,
         guidance=NO_GUIDANCE, cond=None, x_init=None, record: bool = True) -> Trajectory:
    """DDIM with stochasticity ``eta``; ``eta = 0`` draws no noise after the init."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    gen = make_rng(rng)
    x = _initial(model, batch, gen, 1.0, x_init)
    rec = _Recorder(x, ds.grid[-1], record)
    n_clamped = 0
    for k in range(ds.n_steps, 0, -1):
        eps = _discrete_noise(model, ds, x, k, guidance, cond)
        z = gen.standard_normal(x.shape) if ddim_sigma(ds, k, eta) > 0 else None
        x, clamped = ddim_step(ds, x, eps, k, eta, z)
        n_clamped += int(clamped)
        rec.push(x, ds.grid[k - 1])
    return rec.build(seed_of(rng), _tag("ddim", guidance, steps=ds.n_steps, eta=eta,
                                        clamped=n_clamped))


SAMPLERS = {
    "em": em_reverse_sde,
    "euler": euler_reverse_ode,
    "heun": heun_reverse_ode,
    "dpm1": dpm_solver1,
}


# Distribution distances used to grade samplers.

def w1(a, b) -> float:
    """1-Wasserstein distance between two 1D empirical samples."""
    return float(stats.wasserstein_distance(np.ravel(a), np.ravel(b)))


def sliced_w1(a, b, n_directions: int = 64, rng=0) -> float:
    """Average 1D W1 over random unit projections (plain W1 in one dimension)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1 or a.shape[1] == 1:
        return w1(a, b)
    gen = make_rng(rng)
    dirs = gen.standard_normal((n_directions, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return float(np.mean([w1(a @ u, b @ u) for u in dirs]))


def w1_to_cdf(samples, cdf, lo: float, hi: float, n_points: int = 200_001) -> float:
    """W1 between a 1D empirical sample and a distribution given by its CDF.

    Integrates ``|F_n - F|`` by the trapezoid rule on ``[lo, hi]``; mass outside
    the window is ignored, so pick it to cover both distributions.
    """
    s = np.sort(np.ravel(samples))
    xs = np.linspace(lo, hi, n_points)
    empirical = np.searchsorted(s, xs, side="right") / s.size
    return float(integrate.trapezoid(np.abs(empirical - cdf(xs)), xs))
