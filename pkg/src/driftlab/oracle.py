"""Closed-form Gaussian-mixture ground truth.

For ``p0 = sum_m w_m N(mu_m, v_m I)`` the forward marginal stays a mixture,

    p_t = sum_m w_m N(alpha_t mu_m, (alpha_t^2 v_m + sigma_t^2) I),

so the score, the ideal noise predictor ``-sigma_t * score``, the posterior of
``X0 | X_t`` and every velocity field built from them are available exactly.
All functions accept a single point of shape ``(d,)`` or a batch ``(..., d)``;
``t`` may be a scalar or broadcast against the batch shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.optimize import elementwise
from scipy.special import logsumexp

from ._rng import make_rng
from .errors import ConfigError, ConversionError, DomainError
from .schedule import NoiseSchedule


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Isotropic Gaussian mixture, optionally with a class label per component."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.asarray(self.means, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        v = np.atleast_1d(np.asarray(self.variances, dtype=float))
        if mu.ndim != 2 or mu.shape[0] != w.size or v.size != w.size:
            raise ConfigError("weights, means and variances disagree on M")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("weights must be positive and sum to 1")
        if np.any(v <= 0):
            raise ConfigError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", v)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=int)
            if lab.shape != w.shape or np.any(lab < 0):
                raise ConfigError("labels must be nonnegative, one per component")
            object.__setattr__(self, "labels", lab)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def n_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def class_weights(self) -> np.ndarray:
        return np.bincount(self.labels, weights=self.weights, minlength=self.n_classes)

    def restrict(self, c: int) -> "GaussianMixture":
        """Conditional data law ``p0(x | c)``."""
        if self.labels is None:
            raise ConfigError("mixture carries no labels")
        keep = self.labels == c
        if not np.any(keep):
            raise ConfigError(f"no component with label {c}")
        w = self.weights[keep]
        return GaussianMixture(w / w.sum(), self.means[keep], self.variances[keep],
                               self.labels[keep])

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        d = self.dim
        cov = np.zeros((d, d))
        for w, mu, v in zip(self.weights, self.means, self.variances):
            cov += w * (v * np.eye(d) + np.outer(mu - m, mu - m))
        return cov

    def sample(self, count: int, rng=None) -> np.ndarray:
        return sample_data(self, count, rng)[0]

    def to_dict(self) -> dict:
        out = {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }
        if self.labels is not None:
            out["labels"] = self.labels.tolist()
        return out

    @classmethod
    def from_dict(cls, block: dict) -> "GaussianMixture":
        try:
            return cls(block["weights"], block["means"], block["variances"],
                       block.get("labels"))
        except KeyError as exc:
            raise ConfigError(f"mixture block missing {exc}") from None


def standard_normal(d: int = 1) -> GaussianMixture:
    return GaussianMixture([1.0], np.zeros((1, d)), [1.0])


def benchmark_mixture() -> GaussianMixture:
    """The 1D two-mode benchmark: modes at -1 and +1, variance 0.01, labels 0/1."""
    return GaussianMixture([0.5, 0.5], [[-1.0], [1.0]], [0.01, 0.01], labels=[0, 1])


def _prep(x, t):
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    # t broadcasts against batch shape; trailing axis is the state dimension
    return x, t[..., None]


def _component_terms(mix: GaussianMixture, sched: NoiseSchedule, t, x):
    """Per-component mean, variance and log joint ``log w_m N(x; ...)``."""
    x, tt = _prep(x, t)
    a = sched.alpha(tt)[..., None]  # (..., 1, 1)
    s = sched.sigma(tt)[..., None]
    mean = a * mix.means  # (..., M, d)
    var = a[..., 0] ** 2 * mix.variances + s[..., 0] ** 2  # (..., M)
    diff = x[..., None, :] - mean
    d = mix.dim
    log_joint = (
        np.log(mix.weights)
        - 0.5 * d * np.log(2 * np.pi * var)
        - 0.5 * np.sum(diff * diff, axis=-1) / var
    )
    return diff, var, log_joint


def _softmax(log_joint):
    shifted = np.exp(log_joint - np.max(log_joint, axis=-1, keepdims=True))
    return shifted / np.sum(shifted, axis=-1, keepdims=True)


def responsibilities(mix: GaussianMixture, sched: NoiseSchedule, t, x) -> np.ndarray:
    """Posterior component probabilities ``P(m | X_t = x)``."""
    _, _, lj = _component_terms(mix, sched, t, x)
    return _softmax(lj)


def marginal_logpdf(mix: GaussianMixture, sched: NoiseSchedule, t, x):
    _, _, lj = _component_terms(mix, sched, t, x)
    return logsumexp(lj, axis=-1)


def marginal_score(mix: GaussianMixture, sched: NoiseSchedule, t, x):
    diff, var, lj = _component_terms(mix, sched, t, x)
    r = _softmax(lj)
    return -np.sum((r / var)[..., None] * diff, axis=-2)


def ideal_noise(mix: GaussianMixture, sched: NoiseSchedule, t, x):
    """``eps*(x, t) = -sigma_t grad log p_t(x) = E[eps | X_t = x]``."""
    s = np.asarray(sched.sigma(np.asarray(t, dtype=float)))
    if np.any(s <= 0):
        raise ConversionError("ideal noise predictor undefined where sigma_t = 0")
    return -s[..., None] * marginal_score(mix, sched, t, x)


def posterior_mean_x0(mix: GaussianMixture, sched: NoiseSchedule, t, x):
    """``E[X0 | X_t = x]`` from per-component conjugate updates."""
    x, tt = _prep(x, t)
    diff, var, lj = _component_terms(mix, sched, t, x)
    r = _softmax(lj)
    a = sched.alpha(tt)[..., None]
    gain = (a[..., 0] * mix.variances / var)[..., None]  # (..., M, 1)
    comp_mean = mix.means + gain * diff
    return np.sum(r[..., None] * comp_mean, axis=-2)


def sample_posterior_x0(mix: GaussianMixture, sched: NoiseSchedule, t: float, x,
                        count: int, rng=None) -> np.ndarray:
    """Exact draws of ``X0 | X_t = x`` for a single point ``x``."""
    rng = make_rng(rng)
    x = np.asarray(x, dtype=float).reshape(mix.dim)
    r = responsibilities(mix, sched, t, x)
    a, s = float(sched.alpha(t)), float(sched.sigma(t))
    var = a * a * mix.variances + s * s
    comp = rng.choice(mix.n_components, size=count, p=r / r.sum())
    gain = a * mix.variances / var
    means = mix.means + gain[:, None] * (x - a * mix.means)
    post_var = mix.variances * s * s / var
    z = rng.standard_normal((count, mix.dim))
    return means[comp] + np.sqrt(post_var[comp])[:, None] * z


def conditional_score(sched: NoiseSchedule, t, x, x0):
    """``grad log p_t(x | x0) = -(x - alpha_t x0) / sigma_t^2``."""
    x, tt = _prep(x, t)
    return -(x - sched.alpha(tt) * np.asarray(x0)) / sched.sigma(tt) ** 2


def conditional_velocity(sched: NoiseSchedule, t, x, x0):
    """``u_t(x|x0) = (alpha_dot - sigma_dot/sigma * alpha) x0 + sigma_dot/sigma * x``."""
    x, tt = _prep(x, t)
    s = sched.sigma(tt)
    if np.any(s <= 0):
        raise ConversionError("conditional velocity singular where sigma_t = 0")
    ratio = sched.sigma_dot(tt) / s
    return (sched.alpha_dot(tt) - ratio * sched.alpha(tt)) * np.asarray(x0) + ratio * x


def conditional_velocity_score_form(sched: NoiseSchedule, t, x, x0):
    """``f x - g^2/2 grad log p_t(x|x0)`` (forward time) or ``f x + g^2/2 ...`` (generative)."""
    dd = sched.drift_diffusion(t)
    x, tt = _prep(x, t)
    f, g2 = np.asarray(dd.f)[..., None], np.asarray(dd.g2)[..., None]
    sign = 1.0 if sched.generative else -1.0
    return f * x + sign * 0.5 * g2 * conditional_score(sched, t, x, x0)


def marginal_velocity(mix: GaussianMixture, sched: NoiseSchedule, t, x):
    """Probability-flow velocity ``f x - g^2/2 grad log p_t`` (sign flips in generative time)."""
    dd = sched.drift_diffusion(t)
    x = np.asarray(x, dtype=float)
    f = np.asarray(dd.f)[..., None]
    g2 = np.asarray(dd.g2)[..., None]
    sign = 1.0 if sched.generative else -1.0
    return f * x + sign * 0.5 * g2 * marginal_score(mix, sched, t, x)


def marginal_velocity_posterior_form(mix: GaussianMixture, sched: NoiseSchedule, t, x):
    """``E[u_t(x | X0) | X_t = x]`` through the posterior mean of ``X0``."""
    return conditional_velocity(sched, t, x, posterior_mean_x0(mix, sched, t, x))


def sample_data(mix: GaussianMixture, count: int, rng=None):
    """Draw ``count`` points from ``p0``; returns ``(x0, component_index)``."""
    rng = make_rng(rng)
    comp = rng.choice(mix.n_components, size=count, p=mix.weights)
    z = rng.standard_normal((count, mix.dim))
    return mix.means[comp] + np.sqrt(mix.variances[comp])[:, None] * z, comp


def forward_sample(mix: GaussianMixture, sched: NoiseSchedule, t: float, count: int,
                   rng=None) -> np.ndarray:
    """I.i.d. draws of ``X_t = alpha_t X0 + sigma_t eps``."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    rng = make_rng(rng)
    x0, _ = sample_data(mix, count, rng)
    eps = rng.standard_normal(x0.shape)
    return sched.alpha(t) * x0 + sched.sigma(t) * eps


def marginal_cdf(mix: GaussianMixture, sched: NoiseSchedule, t: float, x):
    """CDF of the one-dimensional marginal ``X_t`` evaluated at ``x``."""
    if mix.dim != 1:
        raise DomainError("marginal_cdf is defined for one-dimensional mixtures only")
    a, s = float(sched.alpha(t)), float(sched.sigma(t))
    scale = np.sqrt(a * a * mix.variances + s * s)
    x = np.asarray(x, dtype=float)[..., None]
    return np.sum(mix.weights * stats.norm.cdf(x, a * mix.means[:, 0], scale), axis=-1)


def marginal_quantile(mix: GaussianMixture, sched: NoiseSchedule, t: float, q):
    """Inverse of :func:`marginal_cdf` by bracketed root finding, for ``q`` in (0, 1)."""
    q = np.atleast_1d(np.asarray(q, dtype=float))
    if np.any((q <= 0) | (q >= 1)):
        raise DomainError("quantile levels must lie strictly inside (0, 1)")
    a, s = float(sched.alpha(t)), float(sched.sigma(t))
    centers = a * mix.means[:, 0]
    spread = np.sqrt(a * a * mix.variances + s * s).max()
    lo = np.full_like(q, centers.min() - 40 * spread)
    hi = np.full_like(q, centers.max() + 40 * spread)
    res = elementwise.find_root(lambda x, level: marginal_cdf(mix, sched, t, x) - level,
                                (lo, hi), args=(q,), tolerances={"xatol": 1e-12, "xrtol": 0.0})
    if not np.all(res.success):
        raise DomainError("quantile root finding did not converge")
    return res.x


def support_grid(mix: GaussianMixture, sched: NoiseSchedule, t: float, n: int = 61,
                 mass: float = 0.99) -> np.ndarray:
    """Evenly spaced points spanning the central ``mass`` of the 1D marginal at ``t``."""
    tail = 0.5 * (1.0 - mass)
    lo, hi = marginal_quantile(mix, sched, t, [tail, 1.0 - tail])
    return np.linspace(lo, hi, n)


def marginal_moments(mix: GaussianMixture, sched: NoiseSchedule, t: float):
    """Mean vector and covariance matrix of ``X_t``."""
    a, s = float(sched.alpha(t)), float(sched.sigma(t))
    return a * mix.mean(), a * a * mix.covariance() + s * s * np.eye(mix.dim)


# Labeled mixtures: class posteriors and class scores used by guidance.

def class_log_posterior(mix: GaussianMixture, sched: NoiseSchedule, t, x):
    """``log p_t(c | x)`` for every class, shape ``(..., C)``."""
    _, _, lj = _component_terms(mix, sched, t, x)
    total = logsumexp(lj, axis=-1, keepdims=True)
    out = []
    for c in range(mix.n_classes):
        out.append(logsumexp(lj[..., mix.labels == c], axis=-1) - total[..., 0])
    return np.stack(out, axis=-1)


def class_score(mix: GaussianMixture, sched: NoiseSchedule, t, x, c: int):
    """``grad_x log p_t(c | x) = grad log p_t(x | c) - grad log p_t(x)``."""
    return (marginal_score(mix.restrict(c), sched, t, x)
            - marginal_score(mix, sched, t, x))


def conditional_marginal_score(mix: GaussianMixture, sched: NoiseSchedule, t, x, c: int):
    return marginal_score(mix.restrict(c), sched, t, x)
