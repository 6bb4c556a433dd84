"""Training loop, frame scoring and intervention-effect estimation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as tn
from .dataset import Batch, ExampleSet
from .errors import ConfigError, ModelError, OptimizerError, TrainingError
from .model import CausalModel, LossBreakdown, ModelConfig, causal_objective
from .optim import DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS, DEFAULT_LEARNING_RATE, Adam

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    adam_eps: float = DEFAULT_EPS
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class EpochMetrics:
    epoch: int
    loss: LossBreakdown
    helper_t_acc: float
    helper_y_acc: float

    COLUMNS = (
        "epoch",
        "total",
        "helper_t",
        "helper_y",
        "recon_x",
        "likelihood_t",
        "likelihood_y",
        "kl_z",
        "helper_t_acc",
        "helper_y_acc",
    )

    def row(self) -> tuple:
        l = self.loss
        return (
            self.epoch,
            l.total,
            l.helper_t,
            l.helper_y,
            l.recon_x,
            l.likelihood_t,
            l.likelihood_y,
            l.kl_z,
            self.helper_t_acc,
            self.helper_y_acc,
        )


@dataclass
class TrainResult:
    model: CausalModel
    trace: list[EpochMetrics]


def epoch_noise(seed: int, epoch: int, n: int, d_z: int) -> np.ndarray:
    """Standard-normal noise for every example of one epoch.

    Drawn from a counter-based stream keyed by (seed, epoch), so an example's
    noise depends only on its position in the dataset, never on batching.
    """
    bitgen = np.random.Philox(np.random.SeedSequence([seed, epoch, 3]))
    return np.random.Generator(bitgen).standard_normal((n, d_z))


def _weighted_mean(parts: list[LossBreakdown]) -> LossBreakdown:
    n = sum(p.batch_size for p in parts)
    avg = {
        f.name: sum(getattr(p, f.name) * p.batch_size for p in parts) / n
        for f in fields(LossBreakdown)
        if f.name != "batch_size"
    }
    return LossBreakdown(batch_size=n, **avg)


def train(
    data: ExampleSet,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    model: CausalModel | None = None,
) -> TrainResult:
    """Fit all heads jointly with Adam.  Deterministic given ``cfg.seed``."""
    if len(data) == 0:
        raise TrainingError("no training examples")
    if data.d_x != model_cfg.d_v:
        raise TrainingError(f"features have width {data.d_x}, model expects d_v={model_cfg.d_v}")
    if np.any(data.y >= model_cfg.n_classes):
        raise TrainingError("labels exceed the configured number of classes")
    model = model if model is not None else CausalModel(model_cfg, cfg.seed)
    opt = Adam(model.named_parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    trace: list[EpochMetrics] = []
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch, 1]).permutation(n)
        noise = epoch_noise(cfg.seed, epoch, n, model_cfg.d_z)
        parts: list[LossBreakdown] = []
        t_hits = y_hits = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            loss, breakdown, hits = causal_objective(model, data.batch(idx), noise[idx])
            if not np.isfinite(breakdown.total):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            loss.backward()
            try:
                opt.step()
            except OptimizerError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
            parts.append(breakdown)
            t_hits += hits["t_correct"]
            y_hits += hits["y_correct"]
        metrics = EpochMetrics(epoch, _weighted_mean(parts), t_hits / n, y_hits / n)
        log.info("epoch %d total=%.4f", epoch, metrics.loss.total)
        trace.append(metrics)
    return TrainResult(model, trace)


# ---------------------------------------------------------------- inference


def _check_finite(model: CausalModel) -> None:
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)):
            raise ModelError(f"parameter group '{name}' holds non-finite values")


def _imputed_posteriors(model: CausalModel, batch: Batch):
    """Helper-imputed (weight, t, posterior) for t = 1 and t = 0."""
    x = model.features(batch)
    p1 = model.helper_intervention(x).p.data
    out = []
    for t_val, weight in ((1, p1), (0, 1.0 - p1)):
        t = np.full(len(batch), t_val)
        q_y = model.helper_outcome(x, t)
        y_soft = q_y.probs().data
        out.append((weight, t, model.posterior(x, y_soft, t, q_y.logits)))
    return out


def predict_scores(model: CausalModel, batch: Batch) -> np.ndarray:
    """Expected class index per frame, averaging the imputed intervention.

    ``z`` is taken at the posterior mean so scores are deterministic.
    """
    _check_finite(model)
    with tn.no_grad():
        score = np.zeros(len(batch))
        for weight, t, post in _imputed_posteriors(model, batch):
            score += weight * model.prior_outcome(post.mean, t).expected_index().data
    return score


def estimate_effect(model: CausalModel, batch: Batch, n_samples: int = 20, seed: int = 0) -> float:
    """Average over frames and posterior draws of E[y | z, t=1] - E[y | z, t=0]."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    _check_finite(model)
    rng = np.random.default_rng([seed, 13])
    n = len(batch)
    ones, zeros = np.ones(n), np.zeros(n)
    with tn.no_grad():
        effect = np.zeros(n)
        for weight, _, post in _imputed_posteriors(model, batch):
            sd = np.sqrt(post.var.data)
            acc = np.zeros(n)
            for _ in range(n_samples):
                z = post.mean.data + sd * rng.standard_normal(sd.shape)
                acc += (
                    model.prior_outcome(z, ones).expected_index().data
                    - model.prior_outcome(z, zeros).expected_index().data
                )
            effect += weight * acc / n_samples
    return float(effect.mean())
