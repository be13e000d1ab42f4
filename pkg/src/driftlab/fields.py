"""Conversions between score / noise / x0 / velocity views and reverse-time fields.

A :class:`FieldModel` wraps any evaluator ``(x, t, cond) -> array`` with a tag
telling which quantity it predicts. Everything downstream works in the noise
view ``eps_hat = -sigma_t * score``:

    reverse SDE drift      f x + (g^2 / sigma) eps_hat
    probability-flow ODE   f x + (g^2 / (2 sigma)) eps_hat

with classifier guidance subtracting ``gamma g^2 grad log p(c|x)`` (halved for
the ODE) and classifier-free guidance replacing ``eps_hat`` by the combination
``(1 - s) eps(x, t, null) + s eps(x, t, c)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import oracle
from .errors import ConfigError, ConversionError, UnsupportedError
from .schedule import NoiseSchedule

SCORE, NOISE, X0, VELOCITY = "score", "noise", "x0", "velocity"
PARAMETERIZATIONS = (SCORE, NOISE, X0, VELOCITY)

# Reserved label for the classifier-free null condition.
NULL_LABEL = -1


@dataclass(frozen=True, eq=False)
class FieldModel:
    evaluator: Callable
    parameterization: str
    dim: int
    backing: str = "oracle"
    conditional: bool = False

    def __post_init__(self):
        if self.parameterization not in PARAMETERIZATIONS:
            raise ConfigError(f"unknown parameterization {self.parameterization!r}")

    def __call__(self, x, t, cond=None):
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.evaluator(x, t, cond), dtype=float)
        if out.shape != x.shape:
            raise ConfigError(f"evaluator returned {out.shape}, expected {x.shape}")
        return out


@dataclass(frozen=True)
class GuidanceSpec:
    mode: str = "none"
    gamma: float = 0.0
    s: float = 1.0
    classifier_grad: Callable | None = None

    def __post_init__(self):
        if self.mode not in ("none", "classifier", "cfg"):
            raise ConfigError(f"unknown guidance mode {self.mode!r}")
        if self.gamma < 0 or self.s < 0:
            raise ConfigError("guidance scales must be nonnegative")
        if self.mode == "classifier" and self.classifier_grad is None:
            raise ConfigError("classifier guidance needs classifier_grad")


NO_GUIDANCE = GuidanceSpec()


def _sigma(sched: NoiseSchedule, t):
    s = np.asarray(sched.sigma(np.asarray(t, dtype=float)), dtype=float)
    if np.any(s <= 0):
        raise ConversionError("sigma_t = 0: parameterization conversion is singular")
    return s[..., None]


def to_noise(model: FieldModel, sched: NoiseSchedule, x, t, cond=None):
    """Noise-view value of ``model`` regardless of its native parameterization."""
    p = model.parameterization
    if p == VELOCITY:
        raise UnsupportedError("velocity models sample through their own ODE only")
    out = model(x, t, cond)
    if p == NOISE:
        return out
    if p == SCORE:
        return -_sigma(sched, t) * out
    a = np.asarray(sched.alpha(np.asarray(t, dtype=float)))[..., None]
    return (np.asarray(x) - a * out) / _sigma(sched, t)


def to_score(model: FieldModel, sched: NoiseSchedule, x, t, cond=None):
    if model.parameterization == SCORE:
        return model(x, t, cond)
    return -to_noise(model, sched, x, t, cond) / _sigma(sched, t)


def cfg_combine(eps_cond, eps_uncond, s: float):
    """Guided predictor ``eps_u + s (eps_c - eps_u)``, written so ``s = 1`` is exact."""
    eps_cond = np.asarray(eps_cond, dtype=float)
    eps_uncond = np.asarray(eps_uncond, dtype=float)
    if eps_cond.shape != eps_uncond.shape:
        raise ConfigError("conditional and unconditional predictions differ in shape")
    return (1.0 - s) * eps_uncond + s * eps_cond


def guided_noise(model: FieldModel, sched: NoiseSchedule, x, t, guidance=NO_GUIDANCE,
                 cond=None):
    """Noise view after classifier-free guidance (classifier guidance is separate)."""
    if guidance.mode == "cfg":
        if not model.conditional:
            raise ConfigError("classifier-free guidance needs a conditional model")
        if cond is None:
            raise ConfigError("classifier-free guidance needs a condition label")
        eps_c = to_noise(model, sched, x, t, cond)
        eps_u = to_noise(model, sched, x, t, NULL_LABEL)
        return cfg_combine(eps_c, eps_u, guidance.s)
    if guidance.mode == "classifier":
        return to_noise(model, sched, x, t, None)
    return to_noise(model, sched, x, t, cond)


def _classifier_term(sched, x, t, guidance, cond):
    if guidance.mode != "classifier":
        return None
    if cond is None:
        raise ConfigError("classifier guidance needs a condition label")
    return guidance.gamma * np.asarray(guidance.classifier_grad(x, t, cond))


def effective_noise(model: FieldModel, sched: NoiseSchedule, x, t, guidance=NO_GUIDANCE,
                    cond=None):
    """Single noise prediction absorbing either guidance type.

    Classifier guidance enters as ``eps_hat - gamma sigma_t grad log p(c|x)``,
    which reproduces the guided drifts exactly; discrete samplers use this form.
    """
    eps = guided_noise(model, sched, x, t, guidance, cond)
    term = _classifier_term(sched, x, t, guidance, cond)
    if term is None:
        return eps
    return eps - _sigma(sched, t) * term


def reverse_sde_drift(model: FieldModel, sched: NoiseSchedule, x, t,
                      guidance=NO_GUIDANCE, cond=None):
    dd = sched.drift_diffusion(t)
    f, g2 = np.asarray(dd.f)[..., None], np.asarray(dd.g2)[..., None]
    eps = guided_noise(model, sched, x, t, guidance, cond)
    drift = f * np.asarray(x) + (g2 / _sigma(sched, t)) * eps
    term = _classifier_term(sched, x, t, guidance, cond)
    if term is not None:
        drift = drift - g2 * term
    return drift


def reverse_ode_velocity(model: FieldModel, sched: NoiseSchedule, x, t,
                         guidance=NO_GUIDANCE, cond=None):
    if model.parameterization == VELOCITY:
        return model(x, t, cond)
    dd = sched.drift_diffusion(t)
    f, g2 = np.asarray(dd.f)[..., None], np.asarray(dd.g2)[..., None]
    eps = guided_noise(model, sched, x, t, guidance, cond)
    vel = f * np.asarray(x) + (g2 / (2.0 * _sigma(sched, t))) * eps
    term = _classifier_term(sched, x, t, guidance, cond)
    if term is not None:
        vel = vel - 0.5 * g2 * term
    return vel


# Oracle-backed models.

def _oracle_score_eval(mix: oracle.GaussianMixture, sched: NoiseSchedule):
    def evaluate(x, t, cond=None):
        if cond is None or (np.ndim(cond) == 0 and int(cond) == NULL_LABEL):
            return oracle.marginal_score(mix, sched, t, x)
        if np.ndim(cond) == 0:
            return oracle.marginal_score(mix.restrict(int(cond)), sched, t, x)
        cond = np.asarray(cond)
        out = oracle.marginal_score(mix, sched, t, x)
        for c in np.unique(cond):
            if c == NULL_LABEL:
                continue
            m = cond == c
            tc = t[m] if np.ndim(t) else t
            out[m] = oracle.marginal_score(mix.restrict(int(c)), sched, tc, x[m])
        return out

    return evaluate


def oracle_score_model(mix: oracle.GaussianMixture, sched: NoiseSchedule) -> FieldModel:
    return FieldModel(_oracle_score_eval(mix, sched), SCORE, mix.dim, "oracle",
                      conditional=mix.labels is not None)


def oracle_noise_model(mix: oracle.GaussianMixture, sched: NoiseSchedule) -> FieldModel:
    score = _oracle_score_eval(mix, sched)

    def evaluate(x, t, cond=None):
        return -_sigma(sched, t) * score(x, t, cond)

    return FieldModel(evaluate, NOISE, mix.dim, "oracle",
                      conditional=mix.labels is not None)


def oracle_velocity_model(mix: oracle.GaussianMixture, sched: NoiseSchedule) -> FieldModel:
    def evaluate(x, t, cond=None):
        return oracle.marginal_velocity(mix, sched, t, x)

    return FieldModel(evaluate, VELOCITY, mix.dim, "oracle")


def analytic_classifier_grad(mix: oracle.GaussianMixture, sched: NoiseSchedule):
    """``grad_x log p_t(c | x)`` of a labeled mixture, usable as ``classifier_grad``."""

    def grad(x, t, c):
        return oracle.class_score(mix, sched, t, x, int(c))

    return grad
