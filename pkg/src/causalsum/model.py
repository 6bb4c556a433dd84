"""Latent-confounder model of frame importance under a binary intervention.

Generative side (conditioned on the latent ``z``):

* ``z ~ N(0, I)``
* ``x | z ~ N(decoder(z), I)``
* ``t | z ~ Bernoulli(sigmoid(prior_t(z)))``
* ``y | z, t ~ Categorical(softmax(t * prior_y_treated(z) + (1 - t) * prior_y_control(z)))``

Inference side: a diagonal Gaussian ``q(z | x, y, t)`` whose mean and
variance heads are switched by ``t``, built on a shared representation that
multiplies a projection of ``(x, y)`` with the helper outcome logits.  Helper
heads ``q(t | x)`` and ``q(y | x, t)`` are fitted to the observed labels and
impute ``t`` and ``y`` for new frames.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as tn
from .dataset import Batch
from .distributions import (
    BernoulliP,
    CategoricalLogits,
    DiagGaussian,
    bernoulli_log_prob,
    categorical_log_prob,
    gaussian_log_prob,
    kl_vs_standard_normal,
    reparam_sample,
)
from .errors import ConfigError, DomainError
from .extractor import SemanticsExtractor
from .nn import MLP, Linear, Module
from .tensor import Tensor

VARIANCE_LINKS = ("exp", "sigmoid")
KL_MODES = ("analytic", "mc")
# raw variance outputs are clamped here before either link, so the variance stays positive
LOGVAR_LIMIT = 30.0


@dataclass(frozen=True)
class ModelConfig:
    d_v: int
    n_classes: int
    d_z: int = 16
    hidden: int = 64
    hidden_layers: int = 2
    variance_link: str = "exp"
    kl_mode: str = "analytic"
    helper_stop_gradient: bool = True
    multimodal: bool = False
    vocab_size: int = 100
    max_query_len: int = 8
    d_model: int = 32
    d_attn: int = 32
    d_fused: int = 64
    kappa: int = 0
    single_stage: bool = False

    def __post_init__(self):
        if self.d_v < 1 or self.d_z < 1 or self.hidden < 1 or self.hidden_layers < 0:
            raise ConfigError("model dimensions must be positive")
        if self.n_classes < 2:
            raise ConfigError("need at least two outcome classes")
        if self.variance_link not in VARIANCE_LINKS:
            raise ConfigError(f"variance_link must be one of {VARIANCE_LINKS}")
        if self.kl_mode not in KL_MODES:
            raise ConfigError(f"kl_mode must be one of {KL_MODES}")
        if self.kappa < 0:
            raise ConfigError("kappa must be >= 0 (0 selects ceil(n/2))")
        if self.multimodal and (self.d_model < 2 or self.d_attn < 2 or self.d_fused < 1):
            raise ConfigError("attention widths must be at least 2")

    @property
    def d_x(self) -> int:
        return self.d_fused if self.multimodal else self.d_v

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LossBreakdown:
    """Batch means of each log-probability term; ``total`` is the minimised loss."""

    total: float
    helper_t: float
    helper_y: float
    recon_x: float
    likelihood_t: float
    likelihood_y: float
    kl_z: float
    batch_size: int


def gate(t, treated: Tensor, control: Tensor) -> Tensor:
    """t * treated + (1 - t) * control with ``t`` broadcast over the last axis."""
    tc = np.asarray(t, dtype=np.float64)[..., None]
    return treated * tc + control * (1.0 - tc)


def one_hot(y, k: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if np.any((y < 0) | (y >= k)):
        raise IndexError(f"class index out of range [0, {k})")
    return np.eye(k)[y]


class CausalModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0])
        hid = [cfg.hidden] * cfg.hidden_layers
        K, d_z, d_x = cfg.n_classes, cfg.d_z, cfg.d_x
        self.extractor = (
            SemanticsExtractor(
                cfg.vocab_size,
                cfg.max_query_len,
                cfg.d_model,
                cfg.d_attn,
                cfg.d_v,
                cfg.d_fused,
                rng,
                kappa=cfg.kappa or None,
                single_stage=cfg.single_stage,
            )
            if cfg.multimodal
            else None
        )
        self.prior_t = MLP([d_z, *hid, 1], rng)
        self.prior_y_treated = MLP([d_z, *hid, K], rng)
        self.prior_y_control = MLP([d_z, *hid, K], rng)
        self.decoder = MLP([d_z, *hid, cfg.d_v], rng)
        self.enc_features = Linear(d_x + K, cfg.hidden, rng)
        self.enc_label = Linear(K, cfg.hidden, rng)
        self.enc_mean_control = MLP([cfg.hidden, *hid, d_z], rng)
        self.enc_logvar_control = MLP([cfg.hidden, *hid, d_z], rng)
        self.enc_mean_treated = MLP([cfg.hidden, *hid, d_z], rng)
        self.enc_logvar_treated = MLP([cfg.hidden, *hid, d_z], rng)
        self.helper_t = MLP([d_x, *hid, 1], rng)
        self.helper_y_treated = MLP([d_x, *hid, K], rng)
        self.helper_y_control = MLP([d_x, *hid, K], rng)

    # -- inputs

    def features(self, batch: Batch) -> Tensor:
        if self.extractor is None:
            return Tensor(batch.x)
        if batch.tokens is None:
            raise DomainError("this model fuses a text query; the batch has none")
        return self.extractor(batch.x, batch.tokens, batch.lengths)

    # -- prior network

    def prior_intervention(self, z) -> BernoulliP:
        return BernoulliP(tn.sigmoid(self.prior_t(z)[..., 0]))

    def prior_outcome(self, z, t) -> CategoricalLogits:
        return CategoricalLogits(gate(t, self.prior_y_treated(z), self.prior_y_control(z)))

    def reconstruct(self, z) -> DiagGaussian:
        mean = self.decoder(z)
        return DiagGaussian(mean, np.ones(mean.shape))

    # -- helpers

    def helper_intervention(self, x) -> BernoulliP:
        return BernoulliP(tn.sigmoid(self.helper_t(x)[..., 0]))

    def helper_outcome(self, x, t) -> CategoricalLogits:
        return CategoricalLogits(gate(t, self.helper_y_treated(x), self.helper_y_control(x)))

    # -- posterior

    def posterior(self, x, y, t, helper_logits: Tensor | None = None) -> DiagGaussian:
        """q(z | x, y, t).

        ``y`` is a class index (array) or a probability vector per row, the
        latter used when the outcome is imputed.
        """
        x = tn._wrap(x)
        y_arr = np.asarray(y)
        y_in = one_hot(y_arr, self.cfg.n_classes) if y_arr.dtype.kind in "iub" else y_arr.astype(np.float64)
        if y_in.shape[:-1] != x.shape[:-1] or y_in.shape[-1] != self.cfg.n_classes:
            raise DomainError(f"outcome input {y_in.shape} does not match features {x.shape}")
        if helper_logits is None:
            helper_logits = self.helper_outcome(x, t).logits
        shared = self.enc_features(tn.concat([x, y_in], axis=-1)) * self.enc_label(helper_logits)
        mean = gate(t, self.enc_mean_treated(shared), self.enc_mean_control(shared))
        raw = gate(t, self.enc_logvar_treated(shared), self.enc_logvar_control(shared))
        raw = tn.clip(raw, -LOGVAR_LIMIT, LOGVAR_LIMIT)
        var = tn.sigmoid(raw) if self.cfg.variance_link == "sigmoid" else tn.exp(raw)
        return DiagGaussian(mean, var)


def causal_objective(
    model: CausalModel, batch: Batch, eps, kl_mode: str | None = None
) -> tuple[Tensor, LossBreakdown, dict]:
    """Differentiable loss, its breakdown, and per-batch helper predictions.

    The returned tensor is the negative batch mean of
    ``log q(t|x) + log q(y|x,t) + log p(x|z) + log p(t|z) + log p(y|t,z) - KL``
    with one reparameterised sample of ``z`` per example.
    """
    n = len(batch)
    if n == 0:
        raise DomainError("empty batch")
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (n, model.cfg.d_z):
        raise DomainError(f"need noise of shape {(n, model.cfg.d_z)}, got {eps.shape}")
    kl_mode = kl_mode or model.cfg.kl_mode
    t, y = batch.t, batch.y

    x = model.features(batch)
    detached = model.cfg.helper_stop_gradient and x.requires_grad
    x_helper = x.detach() if detached else x
    q_t = model.helper_intervention(x_helper)
    q_y = model.helper_outcome(x_helper, t)
    helper_t = bernoulli_log_prob(t, q_t)
    helper_y = categorical_log_prob(y, q_y)

    shared_logits = model.helper_outcome(x, t).logits if detached else q_y.logits
    post = model.posterior(x, y, t, shared_logits)
    z = reparam_sample(post, eps)
    recon = gaussian_log_prob(batch.x, model.reconstruct(z))
    lik_t = bernoulli_log_prob(t, model.prior_intervention(z))
    lik_y = categorical_log_prob(y, model.prior_outcome(z, t))
    if kl_mode == "analytic":
        kl = kl_vs_standard_normal(post)
    else:
        kl = gaussian_log_prob(z, post) - gaussian_log_prob(z, DiagGaussian.standard(z.shape))

    per_example = helper_t + helper_y + recon + lik_t + lik_y - kl
    total = -tn.mean(per_example)
    breakdown = LossBreakdown(
        total=float(total.data),
        helper_t=float(helper_t.data.mean()),
        helper_y=float(helper_y.data.mean()),
        recon_x=float(recon.data.mean()),
        likelihood_t=float(lik_t.data.mean()),
        likelihood_y=float(lik_y.data.mean()),
        kl_z=float(kl.data.mean()),
        batch_size=n,
    )
    predictions = {
        "t_correct": int(np.sum((q_t.p.data > 0.5) == (t == 1))),
        "y_correct": int(np.sum(np.argmax(q_y.logits.data, axis=-1) == y)),
    }
    return total, breakdown, predictions


def causal_loss(batch: Batch, model: CausalModel, eps, kl_mode: str | None = None) -> LossBreakdown:
    with tn.no_grad():
        return causal_objective(model, batch, eps, kl_mode)[1]
