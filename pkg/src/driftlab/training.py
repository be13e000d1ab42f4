"""Denoising, classifier-free, flow-matching and classifier losses for small MLPs.

Every loss draws its own minibatch from a seeded stream and returns a
:class:`LossValue` holding the scalar objective, its gradient with respect to
the flat parameter vector, and the per-sample terms (useful for standard
errors). Passing the same integer seed twice reproduces the batch exactly,
which is what the finite-difference gradient checks rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import oracle
from ._rng import make_rng
from .errors import ConfigError, NumericError
from .fields import NOISE, NULL_LABEL, SCORE, VELOCITY, X0, FieldModel, to_noise
from .mlp import Mlp
from .schedule import DiscreteSchedule, NoiseSchedule

TIME_FEATURES = 4
LAMBDA_CLIP = 10.0
LOSS_KINDS = ("denoise", "cfg", "cfm", "classifier", "ddpm-grid")
WEIGHTS = ("constant", "sigma-squared")


def time_features(sched: NoiseSchedule, t) -> np.ndarray:
    """``(t, sin 2 pi t, cos 2 pi t, clip(lambda_t))`` per row."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    with np.errstate(divide="ignore"):
        lam = np.log(sched.alpha(t)) - np.log(sched.sigma(t))
    lam = np.clip(np.nan_to_num(lam, nan=0.0), -LAMBDA_CLIP, LAMBDA_CLIP)
    return np.stack([t, np.sin(2 * np.pi * t), np.cos(2 * np.pi * t), lam], axis=-1)


def condition_features(cond, n: int, n_classes: int) -> np.ndarray:
    """One-hot rows; ``None`` or the null label give all zeros."""
    out = np.zeros((n, n_classes))
    if n_classes == 0 or cond is None:
        return out
    cond = np.broadcast_to(np.asarray(cond, dtype=int), (n,))
    keep = cond != NULL_LABEL
    if np.any((cond[keep] < 0) | (cond[keep] >= n_classes)):
        raise ConfigError(f"condition label outside 0..{n_classes - 1}")
    out[np.flatnonzero(keep), cond[keep]] = 1.0
    return out


def _rows(x, t, dim):
    x = np.asarray(x, dtype=float)
    lead = x.shape[:-1]
    flat = x.reshape(-1, dim)
    tt = np.broadcast_to(np.asarray(t, dtype=float), lead).reshape(-1)
    return flat, tt, lead


class Denoiser:
    """MLP predicting one field view from ``(x, time embedding, condition)``."""

    def __init__(self, mlp: Mlp, sched: NoiseSchedule, dim: int,
                 parameterization: str = NOISE, n_classes: int = 0):
        if mlp.n_inputs != dim + TIME_FEATURES + n_classes or mlp.n_outputs != dim:
            raise ConfigError("network widths do not match dim/time/condition sizes")
        if parameterization not in (NOISE, SCORE, X0, VELOCITY):
            raise ConfigError(f"unknown parameterization {parameterization!r}")
        self.mlp = mlp
        self.sched = sched
        self.dim = dim
        self.parameterization = parameterization
        self.n_classes = n_classes

    @classmethod
    def build(cls, dim: int, sched: NoiseSchedule, hidden=(64, 64),
              parameterization: str = NOISE, n_classes: int = 0, rng=0) -> "Denoiser":
        widths = (dim + TIME_FEATURES + n_classes, *hidden, dim)
        return cls(Mlp.initialize(widths, rng), sched, dim, parameterization, n_classes)

    def features(self, x, t, cond=None):
        flat, tt, _ = _rows(x, t, self.dim)
        parts = [flat, time_features(self.sched, tt)]
        if self.n_classes:
            parts.append(condition_features(cond, flat.shape[0], self.n_classes))
        return np.concatenate(parts, axis=1)

    def predict(self, x, t, cond=None):
        _, _, lead = _rows(x, t, self.dim)
        return self.mlp(self.features(x, t, cond)).reshape(*lead, self.dim)

    def field_model(self) -> FieldModel:
        return FieldModel(self.predict, self.parameterization, self.dim, "network",
                          conditional=self.n_classes > 0)


class Classifier:
    """Noisy-data classifier: MLP logits over classes from ``(x, time embedding)``."""

    def __init__(self, mlp: Mlp, sched: NoiseSchedule, dim: int, n_classes: int):
        if mlp.n_inputs != dim + TIME_FEATURES or mlp.n_outputs != n_classes:
            raise ConfigError("classifier widths do not match dim/classes")
        self.mlp, self.sched, self.dim, self.n_classes = mlp, sched, dim, n_classes

    @classmethod
    def build(cls, dim: int, n_classes: int, sched: NoiseSchedule, hidden=(32, 32),
              rng=0) -> "Classifier":
        widths = (dim + TIME_FEATURES, *hidden, n_classes)
        return cls(Mlp.initialize(widths, rng), sched, dim, n_classes)

    def features(self, x, t):
        flat, tt, _ = _rows(x, t, self.dim)
        return np.concatenate([flat, time_features(self.sched, tt)], axis=1)

    def log_probs(self, x, t):
        _, _, lead = _rows(x, t, self.dim)
        logits = self.mlp(self.features(x, t))
        out = logits - _logsumexp_rows(logits)
        return out.reshape(*lead, self.n_classes)

    def grad_log_prob(self, x, t, c: int):
        """``grad_x log p_phi(c | x, t)`` by backpropagation to the inputs."""
        _, _, lead = _rows(x, t, self.dim)
        logits, cache = self.mlp.forward(self.features(x, t))
        p = np.exp(logits - _logsumexp_rows(logits))
        upstream = -p
        upstream[:, int(c)] += 1.0
        _, g_in = self.mlp.backward(cache, upstream)
        return g_in[:, :self.dim].reshape(*lead, self.dim)


def _logsumexp_rows(z):
    m = np.max(z, axis=1, keepdims=True)
    return m + np.log(np.sum(np.exp(z - m), axis=1, keepdims=True))


@dataclass(frozen=True)
class TrainConfig:
    weight: str = "constant"
    batch: int = 256
    steps: int = 5000
    lr: float = 1e-2
    momentum: float = 0.9
    p_drop: float = 0.2
    t_min: float | None = None
    t_max: float | None = None
    time_grid: tuple | None = None
    epoch_len: int = 100
    cosine: bool = True

    def __post_init__(self):
        if self.weight not in WEIGHTS:
            raise ConfigError(f"unknown weight {self.weight!r}")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ConfigError("p_drop must lie in [0, 1]")
        if self.batch < 1 or self.steps < 0 or self.lr < 0 or self.epoch_len < 1:
            raise ConfigError("batch, steps, lr and epoch_len must be positive")


class LossValue(NamedTuple):
    value: float
    grad: np.ndarray
    per_sample: np.ndarray


@dataclass
class LossReport:
    epoch_losses: list = field(default_factory=list)
    oracle_gap: float | None = None
    steps: int = 0

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else float("nan")


def _sample_times(sched: NoiseSchedule, n: int, gen, cfg: TrainConfig):
    if cfg.time_grid is not None:
        grid = np.asarray(cfg.time_grid, dtype=float)
        return grid[gen.integers(0, grid.size, size=n)]
    lo = sched.t_min if cfg.t_min is None else cfg.t_min
    hi = sched.t_max if cfg.t_max is None else cfg.t_max
    return gen.uniform(lo, hi, size=n)


def _regression(net: Denoiser, x, t, cond, target, weight):
    feats = net.features(x, t, cond)
    out, cache = net.mlp.forward(feats)
    resid = out - target
    per = 0.5 * weight * np.sum(resid * resid, axis=1)
    grad_out = (weight[:, None] * resid) / x.shape[0]
    grad, _ = net.mlp.backward(cache, grad_out)
    return LossValue(float(np.mean(per)), grad, per)


def _noised(mix, sched, batch, gen, cfg):
    x0, comp = oracle.sample_data(mix, batch, gen)
    eps = gen.standard_normal(x0.shape)
    t = _sample_times(sched, batch, gen, cfg)
    a, s = sched.alpha(t)[:, None], sched.sigma(t)[:, None]
    return x0, comp, eps, t, a * x0 + s * eps, s[:, 0]


def _denoise_target(net: Denoiser, x0, eps, s):
    p = net.parameterization
    if p == NOISE:
        return eps
    if p == SCORE:
        return -eps / s[:, None]
    if p == X0:
        return x0
    raise ConfigError("velocity models train with cfm_loss")


def _weights(cfg: TrainConfig, s):
    return s * s if cfg.weight == "sigma-squared" else np.ones_like(s)


def denoising_loss(net: Denoiser, mix, sched: NoiseSchedule, batch: int, rng=0,
                   cfg: TrainConfig = TrainConfig()) -> LossValue:
    """``1/2 omega(t) ||net(alpha x0 + sigma eps, t) - target||^2`` averaged over a batch.

    The target is ``eps`` for noise models, the conditional score ``-eps/sigma``
    for score models and ``x0`` for clean-sample models.
    """
    gen = make_rng(rng)
    x0, _, eps, t, x, s = _noised(mix, sched, batch, gen, cfg)
    return _regression(net, x, t, None, _denoise_target(net, x0, eps, s), _weights(cfg, s))


def cfg_loss(net: Denoiser, mix, sched: NoiseSchedule, batch: int, rng=0,
             cfg: TrainConfig = TrainConfig()) -> LossValue:
    """Denoising loss on the label, replaced by the null label with probability ``p_drop``."""
    if not 0.0 <= cfg.p_drop <= 1.0:
        raise ConfigError("p_drop must lie in [0, 1]")
    if mix.labels is None or net.n_classes == 0:
        raise ConfigError("cfg_loss needs a labeled mixture and a conditional network")
    gen = make_rng(rng)
    x0, comp, eps, t, x, s = _noised(mix, sched, batch, gen, cfg)
    cond = mix.labels[comp].copy()
    cond[gen.random(batch) < cfg.p_drop] = NULL_LABEL
    return _regression(net, x, t, cond, _denoise_target(net, x0, eps, s), _weights(cfg, s))


def cfm_loss(net: Denoiser, mix, sched_gen: NoiseSchedule, batch: int, rng=0,
             cfg: TrainConfig = TrainConfig()) -> LossValue:
    """Conditional flow matching in generative time (noise at 0, data at 1).

    The per-sample target is the path derivative ``alpha_dot x1 + sigma_dot eps``,
    i.e. the conditional velocity evaluated at the sampled point.
    """
    if net.parameterization != VELOCITY:
        raise ConfigError("cfm_loss needs a velocity network")
    if not sched_gen.generative:
        raise ConfigError("cfm_loss needs a generative-time schedule")
    gen = make_rng(rng)
    x1, _, eps, t, x, _ = _noised(mix, sched_gen, batch, gen, cfg)
    target = sched_gen.alpha_dot(t)[:, None] * x1 + sched_gen.sigma_dot(t)[:, None] * eps
    return _regression(net, x, t, None, target, np.ones(batch))


def classifier_nll_loss(clf: Classifier, mix, sched: NoiseSchedule, batch: int, rng=0,
                        cfg: TrainConfig = TrainConfig()) -> LossValue:
    """Mean ``-log p_phi(c | x_t, t)`` on noised labeled data."""
    if mix.labels is None:
        raise ConfigError("classifier loss needs a labeled mixture")
    gen = make_rng(rng)
    _, comp, _, t, x, _ = _noised(mix, sched, batch, gen, cfg)
    c = mix.labels[comp]
    logits, cache = clf.mlp.forward(clf.features(x, t))
    logp = logits - _logsumexp_rows(logits)
    per = -logp[np.arange(batch), c]
    upstream = np.exp(logp)
    upstream[np.arange(batch), c] -= 1.0
    grad, _ = clf.mlp.backward(cache, upstream / batch)
    return LossValue(float(np.mean(per)), grad, per)


def ddpm_grid_loss(net: Denoiser, mix, ds: DiscreteSchedule, batch: int, rng=0,
                   cfg: TrainConfig = TrainConfig()) -> LossValue:
    """Simplified DDPM objective ``1/2 ||eps_theta(x_k, t_k) - eps||^2`` with ``k`` uniform."""
    if net.parameterization != NOISE:
        raise ConfigError("ddpm_grid_loss needs a noise network")
    gen = make_rng(rng)
    x0, _ = oracle.sample_data(mix, batch, gen)
    eps = gen.standard_normal(x0.shape)
    k = gen.integers(1, ds.n_steps + 1, size=batch)
    a_bar = ds.a_bar[k][:, None]
    x = np.sqrt(a_bar) * x0 + np.sqrt(1.0 - a_bar) * eps
    return _regression(net, x, ds.grid[k], None, eps, np.ones(batch))


def loss_function(kind: str, *, mix, sched=None, ds=None) -> Callable:
    """Bind the data and schedule of a loss kind; returns ``fn(model, batch, rng, cfg)``."""
    if kind == "denoise":
        return lambda m, b, r, c: denoising_loss(m, mix, sched, b, r, c)
    if kind == "cfg":
        return lambda m, b, r, c: cfg_loss(m, mix, sched, b, r, c)
    if kind == "cfm":
        return lambda m, b, r, c: cfm_loss(m, mix, sched, b, r, c)
    if kind == "classifier":
        return lambda m, b, r, c: classifier_nll_loss(m, mix, sched, b, r, c)
    if kind == "ddpm-grid":
        if ds is None:
            raise ConfigError("ddpm-grid loss needs a discrete schedule")
        return lambda m, b, r, c: ddpm_grid_loss(m, mix, ds, b, r, c)
    raise ConfigError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def train(model, loss_kind: str, cfg: TrainConfig, rng=0, *, mix, sched=None, ds=None,
          probe: Callable | None = None) -> LossReport:
    """SGD with momentum and cosine-decayed step size; updates ``model.mlp`` in place.

    ``probe(model)`` is evaluated once at the end and stored as the oracle gap.
    """
    fn = loss_function(loss_kind, mix=mix, sched=sched, ds=ds)
    gen = make_rng(rng)
    if not np.all(np.isfinite(model.mlp.params)):
        raise NumericError("initial parameters are not finite")
    velocity = np.zeros_like(model.mlp.params)
    report = LossReport()
    running = []
    for step in range(cfg.steps):
        lr = cfg.lr
        if cfg.cosine:
            lr = 0.5 * cfg.lr * (1.0 + np.cos(np.pi * step / cfg.steps))
        value, grad, _ = fn(model, cfg.batch, gen, cfg)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite loss {value!r} at step {step} ({loss_kind})")
        velocity = cfg.momentum * velocity - lr * grad
        model.mlp.params += velocity
        running.append(value)
        if len(running) == cfg.epoch_len:
            report.epoch_losses.append(float(np.mean(running)))
            running = []
    if running:
        report.epoch_losses.append(float(np.mean(running)))
    report.steps = cfg.steps
    if probe is not None:
        report.oracle_gap = float(probe(model))
    return report


def gradient_check(model, loss: Callable, n_coords: int = 20, step: float = 1e-5,
                   rng=0) -> float:
    """Relative error between the analytic gradient and central differences.

    ``loss(model) -> LossValue`` must be deterministic (fixed batch seed).
    Returns ``||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||)`` over
    ``n_coords`` random coordinates.
    """
    gen = make_rng(rng)
    params = model.mlp.params
    base = params.copy()
    analytic = loss(model).grad
    idx = gen.choice(params.size, size=min(n_coords, params.size), replace=False)
    fd = np.empty(idx.size)
    for j, i in enumerate(idx):
        params[i] = base[i] + step
        up = loss(model).value
        params[i] = base[i] - step
        down = loss(model).value
        params[i] = base[i]
        fd[j] = (up - down) / (2 * step)
    a = analytic[idx]
    scale = max(np.linalg.norm(a), np.linalg.norm(fd), 1e-300)
    return float(np.linalg.norm(a - fd) / scale)


# Probe-grid comparisons against the oracle.

PROBE_TIMES = (0.3, 0.5, 0.7)
PROBE_XS = np.linspace(-3.0, 3.0, 61)


def noise_probe_rmse(net: Denoiser, mix, sched: NoiseSchedule, times=PROBE_TIMES,
                     xs=PROBE_XS, cond=None) -> float:
    """RMSE between the network's noise view and the ideal ``eps*`` on a probe grid.

    ``cond`` selects the class-conditional oracle (``None`` or the null label use
    the full mixture).
    """
    target_mix = mix if cond is None or cond == NULL_LABEL else mix.restrict(int(cond))
    model = net.field_model()
    errs = []
    for t in times:
        x = _probe_points(xs, net.dim)
        pred = to_noise(model, sched, x, t, cond)
        errs.append(pred - oracle.ideal_noise(target_mix, sched, t, x))
    return float(np.sqrt(np.mean(np.square(errs))))


def velocity_probe_rmse(net: Denoiser, mix, sched_gen: NoiseSchedule, times=(0.5,),
                        xs=PROBE_XS) -> float:
    errs = []
    for t in times:
        x = _probe_points(xs, net.dim)
        errs.append(net.predict(x, t) - oracle.marginal_velocity(mix, sched_gen, t, x))
    return float(np.sqrt(np.mean(np.square(errs))))


def _probe_points(xs, dim):
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        return np.repeat(xs[:, None], dim, axis=1)
    return xs
