"""Continuous noise schedules, drift/diffusion coefficients and the DDPM bridge.

A schedule is the pair ``(alpha_t, sigma_t)`` of the Gaussian forward kernel
``p_t(x | x0) = N(alpha_t x0, sigma_t^2 I)`` together with its time derivatives.
From it we derive

    f_t  = alpha_dot / alpha
    g2_t = d(sigma^2)/dt - 2 f_t sigma^2          (forward / noising time)
    g2_t = -d(sigma^2)/dt + 2 f_t sigma^2         (generative time, alpha_0 = 0)

and the log-SNR ``lambda_t = log(alpha_t / sigma_t)``.

Discrete DDPM schedules are obtained on a grid ``0 = t_0 < ... < t_N = 1`` via
the integrated noise ``h_k = int_{t_{k-1}}^{t_k} beta(s) ds`` with
``a_k = exp(-h_k)``, ``b_k = 1 - a_k`` and ``a_bar_k = prod_{i<=k} a_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, optimize
from scipy.interpolate import CubicSpline

from .errors import (
    DomainError,
    GridError,
    InfiniteSnrError,
    NumericError,
    ScheduleError,
    UnsupportedError,
)

T_MIN = 1e-4
T_MAX = 1.0 - 1e-4
FD_STEP = 1e-6

VP_CONSTANT = "vp-constant"
VP_LINEAR = "vp-linear"
GENERIC = "generic"
DLM_SQRT = "dlm-sqrt"
VP_KINDS = (VP_CONSTANT, VP_LINEAR, DLM_SQRT)

ArrayLike = float | np.ndarray
Fn = Callable[[np.ndarray], np.ndarray]


def _central_diff(fn: Fn, step: float = FD_STEP) -> Fn:
    # 4th-order central stencil
    def deriv(t):
        t = np.asarray(t, dtype=float)
        return (
            -fn(t + 2 * step) + 8 * fn(t + step) - 8 * fn(t - step) + fn(t - 2 * step)
        ) / (12 * step)

    return deriv


@dataclass(frozen=True)
class DriftDiffusion:
    """Linear drift coefficient ``f`` and squared diffusion ``g2`` at one time."""

    f: ArrayLike
    g2: ArrayLike


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Differentiable signal/noise scales of a Gaussian forward path.

    ``generative=True`` marks the mirrored convention (noise at ``t=0``, data at
    ``t=1``) used for flow matching; the drift/diffusion formulas change sign
    accordingly.
    """

    alpha: Fn
    sigma: Fn
    alpha_dot: Fn
    sigma_dot: Fn
    kind: str = GENERIC
    beta: Fn | None = None
    generative: bool = False
    params: dict = field(default_factory=dict)
    t_min: float = T_MIN
    t_max: float = T_MAX

    def __post_init__(self):
        ts = np.linspace(self.t_min, self.t_max, 1024)
        a, s = self.alpha(ts), self.sigma(ts)
        if np.any(a < 0) or np.any(s < 0):
            raise ScheduleError("alpha and sigma must be nonnegative")
        if self.is_vp and np.max(np.abs(a * a + s * s - 1.0)) > 1e-12:
            raise ScheduleError("VP schedule violates alpha^2 + sigma^2 = 1")
        g2 = self._g2(ts)
        if np.min(g2) < -1e-12 * max(1.0, float(np.max(np.abs(g2)))):
            raise ScheduleError("induced diffusion coefficient g^2 is negative")
        lam = np.log(a) - np.log(s)
        dl = np.diff(lam)
        object.__setattr__(
            self, "lambda_monotone", bool(np.all(dl < 0) or np.all(dl > 0))
        )

    @property
    def is_vp(self) -> bool:
        return self.kind in VP_KINDS

    def in_domain(self, t) -> bool:
        t = np.asarray(t)
        return bool(np.all((t >= self.t_min) & (t <= self.t_max)))

    def clamp(self, t):
        return np.clip(t, self.t_min, self.t_max)

    def _g2(self, t):
        a, s = self.alpha(t), self.sigma(t)
        f = self.alpha_dot(t) / a
        dvar = 2.0 * s * self.sigma_dot(t)
        if self.generative:
            return -dvar + 2.0 * f * s * s
        return dvar - 2.0 * f * s * s

    def drift_diffusion(self, t) -> DriftDiffusion:
        return drift_diffusion(self, t)

    def log_snr(self, t):
        return log_snr(self, t)

    def mirrored(self) -> "NoiseSchedule":
        """Generative-time copy: ``alpha'(t) = alpha(1-t)``, ``sigma'(t) = sigma(1-t)``."""
        a, s, ad, sd = self.alpha, self.sigma, self.alpha_dot, self.sigma_dot
        return NoiseSchedule(
            alpha=lambda t: a(1.0 - np.asarray(t, dtype=float)),
            sigma=lambda t: s(1.0 - np.asarray(t, dtype=float)),
            alpha_dot=lambda t: -ad(1.0 - np.asarray(t, dtype=float)),
            sigma_dot=lambda t: -sd(1.0 - np.asarray(t, dtype=float)),
            kind=GENERIC,
            generative=not self.generative,
            params={"mirror_of": self.kind, **self.params},
            t_min=1.0 - self.t_max,
            t_max=1.0 - self.t_min,
        )

    def describe(self) -> dict:
        return {"kind": self.kind, "generative": self.generative, **self.params}


def vp_constant(beta: float = 2.0) -> NoiseSchedule:
    """Variance-preserving schedule with constant ``beta(t) = beta``."""
    if beta < 0:
        raise ScheduleError("beta must be nonnegative")

    def B(t):
        return beta * np.asarray(t, dtype=float)

    return _vp_from_integrated(B, lambda t: np.full_like(np.asarray(t, float), beta),
                               VP_CONSTANT, {"beta": beta})


def vp_linear(beta_min: float = 0.1, beta_max: float = 20.0) -> NoiseSchedule:
    """VP schedule with ``beta(t) = beta_min + t (beta_max - beta_min)``."""
    if beta_min < 0 or beta_max < 0:
        raise ScheduleError("beta_min and beta_max must be nonnegative")

    def B(t):
        t = np.asarray(t, dtype=float)
        return beta_min * t + 0.5 * (beta_max - beta_min) * t * t

    def beta(t):
        return beta_min + np.asarray(t, dtype=float) * (beta_max - beta_min)

    return _vp_from_integrated(B, beta, VP_LINEAR,
                               {"beta_min": beta_min, "beta_max": beta_max})


def _vp_from_integrated(B: Fn, beta: Fn, kind: str, params: dict) -> NoiseSchedule:
    # alpha = exp(-B/2), sigma = sqrt(1 - exp(-B)) with B = int_0^t beta
    def alpha(t):
        return np.exp(-0.5 * B(t))

    def sigma(t):
        return np.sqrt(-np.expm1(-B(t)))

    def alpha_dot(t):
        return -0.5 * beta(t) * alpha(t)

    def sigma_dot(t):
        with np.errstate(divide="ignore", invalid="ignore"):
            return 0.5 * beta(t) * np.exp(-B(t)) / sigma(t)

    return NoiseSchedule(alpha, sigma, alpha_dot, sigma_dot, kind=kind, beta=beta,
                         params=params)


def dlm_sqrt() -> NoiseSchedule:
    """``a_bar_t = 1 - sqrt(t)`` with ``alpha = sqrt(a_bar)``, ``sigma = sqrt(1 - a_bar)``."""

    def alpha(t):
        return np.sqrt(1.0 - np.sqrt(np.asarray(t, dtype=float)))

    def sigma(t):
        return np.asarray(t, dtype=float) ** 0.25

    def alpha_dot(t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return -0.25 / (np.sqrt(t) * alpha(t))

    def sigma_dot(t):
        with np.errstate(divide="ignore"):
            return 0.25 * np.asarray(t, dtype=float) ** -0.75

    def beta(t):
        r = np.sqrt(np.asarray(t, dtype=float))
        with np.errstate(divide="ignore"):
            return 0.5 / (r * (1.0 - r))

    return NoiseSchedule(alpha, sigma, alpha_dot, sigma_dot, kind=DLM_SQRT, beta=beta)


def generic(
    alpha: Fn,
    sigma: Fn,
    alpha_dot: Fn | None = None,
    sigma_dot: Fn | None = None,
    *,
    generative: bool = False,
    params: dict | None = None,
) -> NoiseSchedule:
    """Schedule from arbitrary callables; missing derivatives use finite differences."""
    return NoiseSchedule(
        alpha,
        sigma,
        alpha_dot if alpha_dot is not None else _central_diff(alpha),
        sigma_dot if sigma_dot is not None else _central_diff(sigma),
        kind=GENERIC,
        generative=generative,
        params=params or {},
    )


def tabulated(ts, alphas, sigmas) -> NoiseSchedule:
    """Cubic-spline schedule through tabulated ``(t, alpha, sigma)`` triples."""
    ts = np.asarray(ts, dtype=float)
    if ts.ndim != 1 or ts.size < 4 or np.any(np.diff(ts) <= 0):
        raise ScheduleError("tabulated schedule needs >= 4 strictly increasing times")
    ca, cs = CubicSpline(ts, alphas), CubicSpline(ts, sigmas)
    return NoiseSchedule(ca, cs, ca.derivative(), cs.derivative(), kind=GENERIC,
                         params={"tabulated": len(ts)})


def flow_linear() -> NoiseSchedule:
    """Generative-time straight path ``alpha_t = t``, ``sigma_t = 1 - t``."""
    return NoiseSchedule(
        alpha=lambda t: np.asarray(t, dtype=float) * 1.0,
        sigma=lambda t: 1.0 - np.asarray(t, dtype=float),
        alpha_dot=lambda t: np.ones_like(np.asarray(t, dtype=float)),
        sigma_dot=lambda t: -np.ones_like(np.asarray(t, dtype=float)),
        kind=GENERIC,
        generative=True,
        params={"path": "linear"},
    )


def drift_diffusion(schedule: NoiseSchedule, t) -> DriftDiffusion:
    """Return ``(f_t, g_t^2)``; VP schedules use ``(-beta/2, beta)`` directly."""
    if not schedule.in_domain(t):
        raise DomainError(
            f"t={t!r} outside [{schedule.t_min}, {schedule.t_max}]"
        )
    if schedule.is_vp and schedule.beta is not None and not schedule.generative:
        b = schedule.beta(t)
        return DriftDiffusion(-0.5 * b, b)
    f = schedule.alpha_dot(t) / schedule.alpha(t)
    g2 = schedule._g2(t)
    if np.any(g2 < -1e-12):
        raise ScheduleError(f"g^2 = {g2!r} < 0 at t={t!r}")
    return DriftDiffusion(f, np.maximum(g2, 0.0))


def log_snr(schedule: NoiseSchedule, t):
    """``lambda_t = log(alpha_t / sigma_t)``."""
    s = schedule.sigma(t)
    if np.any(np.asarray(s) <= 0):
        raise InfiniteSnrError(f"sigma_t = 0 at t={t!r}")
    return np.log(schedule.alpha(t)) - np.log(s)


@dataclass(frozen=True)
class LogSnr:
    """The monotone map ``t -> lambda_t`` and its inverse."""

    schedule: NoiseSchedule

    def __post_init__(self):
        if not self.schedule.lambda_monotone:
            raise ScheduleError("log-SNR is not monotone on the schedule domain")

    def __call__(self, t):
        return log_snr(self.schedule, t)

    def inverse(self, lam: float) -> float:
        lo, hi = self.schedule.t_min, self.schedule.t_max
        flo, fhi = self(lo) - lam, self(hi) - lam
        if flo * fhi > 0:
            raise DomainError(f"lambda={lam} outside the range of the schedule")
        return optimize.brentq(lambda t: float(self(t)) - lam, lo, hi,
                               xtol=1e-14, rtol=4 * np.finfo(float).eps)


@dataclass(frozen=True, eq=False)
class DiscreteSchedule:
    """Grid-aligned DDPM coefficients, indexed by ``k = 0..N``.

    Per-step arrays (``h``, ``a``, ``b``, ``b_tilde``) carry a neutral entry at
    ``k = 0`` (``h_0 = 0``, ``a_0 = 1``) so that indices match the step number.
    """

    grid: np.ndarray
    h: np.ndarray
    a: np.ndarray
    b: np.ndarray
    a_bar: np.ndarray
    b_tilde: np.ndarray
    schedule: NoiseSchedule | None = None

    @property
    def n_steps(self) -> int:
        return len(self.grid) - 1

    def alpha(self, k):
        return np.sqrt(self.a_bar[k])

    def sigma(self, k):
        return np.sqrt(1.0 - self.a_bar[k])


def _check_forward_grid(grid) -> np.ndarray:
    if isinstance(grid, (int, np.integer)):
        grid = np.linspace(0.0, 1.0, int(grid) + 1)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise GridError("grid needs at least two points")
    if np.any(np.diff(grid) <= 0):
        raise GridError("grid must be strictly increasing")
    if grid[0] != 0.0 or grid[-1] != 1.0:
        raise GridError("grid must start at 0 and end at 1")
    return grid


def discretize(schedule: NoiseSchedule, grid) -> DiscreteSchedule:
    """Bridge a VP schedule to DDPM coefficients on ``grid`` (or ``N`` uniform steps)."""
    if not schedule.is_vp or schedule.beta is None or schedule.generative:
        raise UnsupportedError(f"discretize needs a VP schedule, got {schedule.kind}")
    grid = _check_forward_grid(grid)
    n = grid.size - 1
    h = np.zeros(n + 1)
    for k in range(1, n + 1):
        val, err = integrate.quad(schedule.beta, grid[k - 1], grid[k],
                                  epsabs=1e-12, epsrel=1e-12, limit=200)
        if not np.isfinite(val) or err > 1e-10 * max(1.0, abs(val)):
            raise NumericError(f"quadrature of beta did not converge on step {k}")
        h[k] = val
    a = np.exp(-h)
    b = -np.expm1(-h)
    a_bar = np.cumprod(a)
    b_tilde = np.zeros(n + 1)
    for k in range(1, n + 1):
        b_tilde[k] = _posterior_variance(a_bar[k - 1], a_bar[k], b[k])
    return DiscreteSchedule(grid, h, a, b, a_bar, b_tilde, schedule)


def _posterior_variance(a_bar_prev: float, a_bar_k: float, b_k: float) -> float:
    if b_k == 0.0:
        return 0.0
    return (1.0 - a_bar_prev) / (1.0 - a_bar_k) * b_k


def posterior_variance(ds: DiscreteSchedule, k: int) -> float:
    """``b_tilde_k = (1 - a_bar_{k-1}) / (1 - a_bar_k) * b_k``."""
    if not 1 <= k <= ds.n_steps:
        raise IndexError(f"k={k} outside 1..{ds.n_steps}")
    return _posterior_variance(ds.a_bar[k - 1], ds.a_bar[k], ds.b[k])


def posterior_variance_from_h(a_bar_prev: float, h_k: float) -> float:
    """Same quantity written through ``h_k``: ``(1-a_bar_{k-1})(1-e^{-h})/(1-e^{-h}a_bar_{k-1})``."""
    em = np.exp(-h_k)
    return (1.0 - a_bar_prev) / (1.0 - em * a_bar_prev) * (-np.expm1(-h_k))


def from_config(block: dict) -> NoiseSchedule:
    """Build a schedule from a config mapping with a ``kind`` key."""
    kind = block.get("kind")
    if kind == VP_CONSTANT:
        return vp_constant(float(block.get("beta", 2.0)))
    if kind == VP_LINEAR:
        return vp_linear(float(block.get("beta_min", 0.1)),
                         float(block.get("beta_max", 20.0)))
    if kind == DLM_SQRT:
        return dlm_sqrt()
    if kind == "flow-linear":
        return flow_linear()
    if kind == "tabulated":
        rows = np.asarray(block["table"], dtype=float)
        return tabulated(rows[:, 0], rows[:, 1], rows[:, 2])
    raise ScheduleError(f"unknown schedule kind {kind!r}")
