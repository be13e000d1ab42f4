"""Prompt-conditioned diffusion language model in a frozen embedding space.

Tokens are embedded by a fixed table ``E`` (``d x |V|``). Only the response
block is noised, with ``a_bar_t = 1 - sqrt(t)``; the prompt block ``c0`` is
kept clean and fed to the denoiser, which predicts the clean response
embedding. Generation runs a DDIM-style rollout from ``N(0, lambda_E^2 I)``
and decodes each column by ``argmax E^T x0_hat``.

Shapes: a single sequence block is ``(d, length)``; batches carry a leading
axis, ``(batch, d, length)``.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from ._rng import make_rng
from .errors import ConfigError, NumericError, VocabularyError
from .mlp import Mlp
from .schedule import NoiseSchedule, dlm_sqrt
from .training import TIME_FEATURES, time_features

EPS = 1e-3
DEFAULT_ALPHABET = "abcdefghijklmnop"
TASKS = ("copy", "bigram")


@dataclass(frozen=True)
class Vocab:
    tokens: tuple

    def __post_init__(self):
        toks = tuple(self.tokens)
        object.__setattr__(self, "tokens", toks)
        if len(toks) < 2:
            raise ConfigError("vocabulary needs at least two symbols")
        if len(set(toks)) != len(toks):
            raise ConfigError("vocabulary symbols must be unique")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(toks)})

    @classmethod
    def default(cls, size: int = 16) -> "Vocab":
        if not 2 <= size <= len(DEFAULT_ALPHABET):
            raise ConfigError(f"default vocabulary supports 2..{len(DEFAULT_ALPHABET)} symbols")
        return cls(tuple(DEFAULT_ALPHABET[:size]))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, symbols) -> np.ndarray:
        try:
            return np.array([self._index[s] for s in symbols], dtype=int)
        except KeyError as exc:
            raise VocabularyError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids) -> str:
        return "".join(self.tokens[int(i)] for i in ids)


class EmbeddingTable:
    """Frozen ``d x |V|`` embedding matrix and its RMS scale ``lambda_E``."""

    def __init__(self, matrix):
        e = np.array(matrix, dtype=np.float64)
        if e.ndim != 2 or e.shape[1] < 2:
            raise ConfigError("embedding table must be d x |V| with |V| >= 2")
        if np.all(e == e[:, :1]):
            raise ConfigError("embedding columns are all identical")
        e.setflags(write=False)
        self._matrix = e
        self.lambda_e = float(np.sqrt(np.mean(e * e)))
        if not self.lambda_e > 0:
            raise ConfigError("embedding scale must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def dim(self) -> int:
        return self._matrix.shape[0]

    @property
    def vocab_size(self) -> int:
        return self._matrix.shape[1]

    @classmethod
    def random(cls, vocab_size: int, dim: int, rng=0) -> "EmbeddingTable":
        """Rotated, RMS-1 table with maximally separated columns.

        ``|V| <= d``: orthonormal columns. ``d < |V| <= 2d``: the signed axes
        ``+-Q e_i`` of a random rotation ``Q`` (columns pairwise orthogonal or
        antipodal). Larger vocabularies fall back to normalized Gaussian columns.
        Columns are scaled to norm ``sqrt(d)`` so every entry has RMS 1.
        """
        gen = make_rng(rng)
        q, r = np.linalg.qr(gen.standard_normal((dim, dim)))
        q = q * np.sign(np.diag(r))
        if vocab_size <= dim:
            cols = q[:, :vocab_size]
        elif vocab_size <= 2 * dim:
            k = vocab_size - dim
            cols = np.concatenate([q, -q[:, :k]], axis=1)
        else:
            cols = gen.standard_normal((dim, vocab_size))
            cols /= np.linalg.norm(cols, axis=0, keepdims=True)
        return cls(cols * np.sqrt(dim))

    def digest(self) -> str:
        """SHA-256 of the table bytes (little-endian float64, column-major order)."""
        data = np.asfortranarray(self._matrix).astype("<f8").tobytes(order="F")
        return hashlib.sha256(data).hexdigest()


def embed(vocab: Vocab, table: EmbeddingTable, tokens) -> np.ndarray:
    """Column-stacked embeddings of a symbol sequence, shape ``(d, n)``."""
    if len(vocab) != table.vocab_size:
        raise ConfigError("vocabulary and table sizes differ")
    return embed_ids(table, vocab.encode(tokens))


def embed_ids(table: EmbeddingTable, ids) -> np.ndarray:
    """Embeddings of integer ids; ``(n,) -> (d, n)`` and ``(B, n) -> (B, d, n)``."""
    ids = np.asarray(ids, dtype=int)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise VocabularyError("token id outside the vocabulary")
    cols = table.matrix[:, ids]  # (d, ...) with ids' shape trailing
    return np.moveaxis(cols, 0, -2) if ids.ndim == 2 else cols


def round_to_tokens(table: EmbeddingTable, x_hat) -> np.ndarray:
    """Per-column ``argmax E^T x_hat``; ties go to the lowest token index."""
    logits = rounding_logits(table, x_hat)
    return np.argmax(logits, axis=-2)


def rounding_logits(table: EmbeddingTable, x_hat) -> np.ndarray:
    x_hat = np.asarray(x_hat, dtype=float)
    if x_hat.shape[-2] != table.dim:
        raise ConfigError(f"expected {table.dim} rows, got {x_hat.shape[-2]}")
    return np.einsum("dv,...dl->...vl", table.matrix, x_hat)


@dataclass(frozen=True)
class DlmSchedule:
    """``a_bar_t = 1 - sqrt(t)`` with ``alpha_t = sqrt(a_bar_t)``, ``sigma_t = sqrt(1 - a_bar_t)``."""

    def a_bar(self, t):
        return 1.0 - np.sqrt(np.asarray(t, dtype=float))

    def alpha(self, t):
        return np.sqrt(self.a_bar(t))

    def sigma(self, t):
        return np.sqrt(1.0 - self.a_bar(t))

    def noise_schedule(self) -> NoiseSchedule:
        return dlm_sqrt()

    def drift_diffusion(self, t):
        """``f = a_bar'/(2 a_bar)`` and ``g^2 = -a_bar'/a_bar`` from ``a_bar' = -1/(2 sqrt t)``."""
        t = np.asarray(t, dtype=float)
        a_bar = self.a_bar(t)
        slope = -0.5 / np.sqrt(t)
        return slope / (2.0 * a_bar), -slope / a_bar


DLM_SCHEDULE = DlmSchedule()


def dlm_forward(x0, t, rng=0, schedule: DlmSchedule = DLM_SCHEDULE):
    """``sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps`` on the response block."""
    x0 = np.asarray(x0, dtype=float)
    gen = make_rng(rng)
    eps = gen.standard_normal(x0.shape)
    t = np.asarray(t, dtype=float)
    a_bar = schedule.a_bar(t).reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    return np.sqrt(a_bar) * x0 + np.sqrt(1.0 - a_bar) * eps


def induced_noise(x, x0_hat, t, schedule: DlmSchedule = DLM_SCHEDULE):
    """``(x - sqrt(a_bar) x0_hat) / sqrt(1 - a_bar)``."""
    a_bar = schedule.a_bar(t)
    return (np.asarray(x) - np.sqrt(a_bar) * np.asarray(x0_hat)) / np.sqrt(1.0 - a_bar)


def reverse_sde_drift_direct(x, eps, t, schedule: DlmSchedule = DLM_SCHEDULE):
    """``f x + g^2 / sqrt(1 - a_bar) eps`` with ``f, g^2`` computed from ``a_bar``."""
    f, g2 = schedule.drift_diffusion(t)
    return f * np.asarray(x) + g2 / np.sqrt(1.0 - schedule.a_bar(t)) * np.asarray(eps)


class DlmDenoiser:
    """MLP mapping ``(c0, x_t, t)`` to the clean response embedding.

    Inputs are the flattened prompt block, the flattened noisy response and the
    time embedding; the output is reshaped to ``(d, L)``.
    """

    def __init__(self, mlp: Mlp, dim: int, prompt_len: int, response_len: int):
        expected = dim * (prompt_len + response_len) + TIME_FEATURES
        if mlp.n_inputs != expected or mlp.n_outputs != dim * response_len:
            raise ConfigError("network widths do not match the sequence shapes")
        self.mlp, self.dim = mlp, dim
        self.prompt_len, self.response_len = prompt_len, response_len
        self._time_schedule = dlm_sqrt()

    @classmethod
    def build(cls, dim: int, prompt_len: int, response_len: int, hidden=(256, 256),
              rng=0) -> "DlmDenoiser":
        widths = (dim * (prompt_len + response_len) + TIME_FEATURES, *hidden,
                  dim * response_len)
        return cls(Mlp.initialize(widths, rng), dim, prompt_len, response_len)

    def features(self, c0, x, t):
        c0 = np.asarray(c0, dtype=float)
        x = np.asarray(x, dtype=float)
        if x.shape[-2:] != (self.dim, self.response_len):
            raise ConfigError(f"response block has shape {x.shape[-2:]}, "
                              f"expected {(self.dim, self.response_len)}")
        if c0.shape[-2:] != (self.dim, self.prompt_len):
            raise ConfigError(f"prompt block has shape {c0.shape[-2:]}, "
                              f"expected {(self.dim, self.prompt_len)}")
        b = x.shape[0]
        tt = np.broadcast_to(np.asarray(t, dtype=float), (b,))
        return np.concatenate([c0.reshape(b, -1), x.reshape(b, -1),
                               time_features(self._time_schedule, tt)], axis=1)

    def __call__(self, c0, x, t):
        single = np.ndim(x) == 2
        if single:
            c0, x = np.asarray(c0)[None], np.asarray(x)[None]
        out = self.mlp(self.features(c0, x, t)).reshape(x.shape)
        return out[0] if single else out


class DlmLoss(NamedTuple):
    total: float
    x0_loss: float
    round_loss: float
    grad: np.ndarray


@dataclass(frozen=True)
class DlmBatch:
    prompts: np.ndarray  # (B, n) token ids
    responses: np.ndarray  # (B, L) token ids


def _log_softmax(z, axis):
    m = np.max(z, axis=axis, keepdims=True)
    return z - m - np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))


def dlm_losses(table: EmbeddingTable, x0_hat, x0, targets):
    """``(L_x0 per sequence, L_round per sequence, dL_x0/dx0_hat, dL_round/dx0_hat)``."""
    resid = x0_hat - x0
    x0_loss = np.sum(resid * resid, axis=(-2, -1))
    logp = _log_softmax(rounding_logits(table, x0_hat), axis=-2)  # (B, V, L)
    b, _, length = logp.shape
    picked = np.take_along_axis(logp, targets[:, None, :], axis=1)[:, 0, :]
    round_loss = -picked.mean(axis=-1)
    probs = np.exp(logp)
    np.put_along_axis(probs, targets[:, None, :],
                      np.take_along_axis(probs, targets[:, None, :], axis=1) - 1.0, axis=1)
    d_round = np.einsum("dv,bvl->bdl", table.matrix, probs) / length
    return x0_loss, round_loss, 2.0 * resid, d_round


def dlm_train_step(model: DlmDenoiser, table: EmbeddingTable, batch: DlmBatch,
                   weights=(1.0, 1.0), rng=0, schedule: DlmSchedule = DLM_SCHEDULE) -> DlmLoss:
    """Losses and parameter gradient for one minibatch with ``t ~ U(0, 1)``."""
    if batch.prompts.shape[0] != batch.responses.shape[0]:
        raise ConfigError("prompt and response batches differ in size")
    w_x0, w_round = map(float, weights)
    gen = make_rng(rng)
    c0 = embed_ids(table, batch.prompts)
    x0 = embed_ids(table, batch.responses)
    b = x0.shape[0]
    t = gen.uniform(0.0, 1.0, size=b)
    xt = dlm_forward(x0, t, gen, schedule)
    feats = model.features(c0, xt, t)
    out, cache = model.mlp.forward(feats)
    x0_hat = out.reshape(x0.shape)
    x0_loss, round_loss, d_x0, d_round = dlm_losses(table, x0_hat, x0, batch.responses)
    upstream = (w_x0 * d_x0 + w_round * d_round).reshape(b, -1) / b
    grad, _ = model.mlp.backward(cache, upstream)
    lx, lr = float(x0_loss.mean()), float(round_loss.mean())
    return DlmLoss(w_x0 * lx + w_round * lr, lx, lr, grad)


# Tasks.

def copy_task(vocab_size: int, length: int, count: int, rng=0) -> DlmBatch:
    """Random prompts whose response repeats the prompt."""
    prompts = make_rng(rng).integers(0, vocab_size, size=(count, length))
    return DlmBatch(prompts, prompts.copy())


def bigram_successors(vocab_size: int, rng=0) -> np.ndarray:
    """Fixed successor table: a random cyclic permutation of the vocabulary."""
    order = make_rng(rng).permutation(vocab_size)
    succ = np.empty(vocab_size, dtype=int)
    succ[order] = np.roll(order, -1)
    return succ


def bigram_task(vocab_size: int, prompt_len: int, response_len: int, count: int, rng=0,
                successors=None) -> DlmBatch:
    """Response continues the prompt's last token along the successor table."""
    gen = make_rng(rng)
    succ = bigram_successors(vocab_size, 12345) if successors is None else successors
    prompts = gen.integers(0, vocab_size, size=(count, prompt_len))
    responses = np.empty((count, response_len), dtype=int)
    cur = prompts[:, -1]
    for i in range(response_len):
        cur = succ[cur]
        responses[:, i] = cur
    return DlmBatch(prompts, responses)


def make_corpus(task: str, vocab_size: int, prompt_len: int, response_len: int,
                count: int, rng=0) -> DlmBatch:
    if task == "copy":
        if prompt_len != response_len:
            raise ConfigError("copy task needs equal prompt and response lengths")
        return copy_task(vocab_size, prompt_len, count, rng)
    if task == "bigram":
        return bigram_task(vocab_size, prompt_len, response_len, count, rng)
    raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")


@dataclass
class DlmTrainReport:
    losses: list = field(default_factory=list)
    digest_before: str = ""
    digest_after: str = ""


def dlm_train(model: DlmDenoiser, table: EmbeddingTable, corpus: DlmBatch, steps: int,
              batch_size: int = 64, lr: float = 1e-2, momentum: float = 0.9,
              weights=(1.0, 1.0), rng=0, log_every: int = 100) -> DlmTrainReport:
    """SGD with momentum and cosine decay over minibatches drawn from ``corpus``."""
    gen = make_rng(rng)
    report = DlmTrainReport(digest_before=table.digest())
    velocity = np.zeros_like(model.mlp.params)
    n = corpus.prompts.shape[0]
    running = []
    for step in range(steps):
        idx = gen.integers(0, n, size=batch_size)
        batch = DlmBatch(corpus.prompts[idx], corpus.responses[idx])
        out = dlm_train_step(model, table, batch, weights, gen)
        if not np.isfinite(out.total):
            raise NumericError(f"non-finite loss at step {step}")
        rate = 0.5 * lr * (1.0 + np.cos(np.pi * step / steps))
        velocity = momentum * velocity - rate * out.grad
        model.mlp.params += velocity
        running.append(out.total)
        if len(running) == log_every:
            report.losses.append(float(np.mean(running)))
            running = []
    if running:
        report.losses.append(float(np.mean(running)))
    report.digest_after = table.digest()
    return report


def ddim_sigma(a_bar_t, a_bar_s, eta: float):
    """``eta sqrt((1 - a_bar_s)/(1 - a_bar_t)) sqrt(1 - a_bar_t / a_bar_s)``."""
    return eta * np.sqrt((1.0 - a_bar_s) / (1.0 - a_bar_t)) * np.sqrt(1.0 - a_bar_t / a_bar_s)


def inference_grid(k_steps: int, eps: float = EPS) -> np.ndarray:
    """``1 = t_1 > ... > t_K = eps``, equally spaced."""
    if k_steps < 2:
        raise ConfigError("inference grid needs at least two points")
    return np.linspace(1.0, eps, k_steps)


@dataclass
class Rollout:
    tokens: np.ndarray
    x0_hat: np.ndarray
    trace: list = field(default_factory=list)
    clamped: int = 0


def dlm_infer(model: Callable, table: EmbeddingTable, prompts, response_len: int,
              k_steps: int = 50, eta: float = 0.0, rng=0,
              schedule: DlmSchedule = DLM_SCHEDULE, record: bool = False) -> Rollout:
    """DDIM-style rollout for a batch of prompt id rows; returns decoded token ids.

    ``model(c0, x, t)`` predicts the clean response block. With ``eta = 0`` the
    only random draw is the initial state, so equal seeds give equal tokens.
    """
    if response_len <= 0:
        raise ConfigError("response length must be positive")
    if eta < 0:
        raise ConfigError("eta must be nonnegative")
    prompts = np.atleast_2d(np.asarray(prompts, dtype=int))
    gen = make_rng(rng)
    c0 = embed_ids(table, prompts)
    c0.setflags(write=False)
    b = prompts.shape[0]
    x = table.lambda_e * gen.standard_normal((b, table.dim, response_len))
    grid = inference_grid(k_steps)
    trace, clamped = [], 0
    for t, s in zip(grid[:-1], grid[1:]):
        x0_hat = model(c0, x, t)
        ab_t, ab_s = schedule.a_bar(t), schedule.a_bar(s)
        eps_pred = (x - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)
        sig = ddim_sigma(ab_t, ab_s, eta)
        rad = 1.0 - ab_s - sig * sig
        if rad < 0:
            clamped += 1
            warnings.warn(f"negative radicand {rad:.3g} clamped at t={t:.6g}", RuntimeWarning)
            rad = 0.0
        x = np.sqrt(ab_s) * x0_hat + np.sqrt(rad) * eps_pred
        if sig > 0:
            x = x + sig * gen.standard_normal(x.shape)
        if record:
            trace.append((float(s), x.copy()))
    x0_hat = model(c0, x, grid[-1])
    return Rollout(round_to_tokens(table, x0_hat), x0_hat, trace, clamped)


def token_accuracy(predicted, target) -> float:
    return float(np.mean(np.asarray(predicted) == np.asarray(target)))
