"""Gaussian, Bernoulli and categorical log-densities on tensors.

All functions accept a single vector or a batch whose last axis is the event
axis, and return one log-probability per batch row.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import DomainError, ShapeError
from .tensor import Tensor

PROB_FLOOR = 1e-7
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DiagGaussian:
    mean: Tensor
    var: Tensor

    def __post_init__(self):
        self.mean = tn._wrap(self.mean)
        self.var = tn._wrap(self.var)
        if self.mean.shape != self.var.shape:
            raise ShapeError(f"mean {self.mean.shape} and variance {self.var.shape} differ")
        if np.any(self.var.data <= 0.0):
            raise DomainError("Gaussian variance must be strictly positive")

    @classmethod
    def standard(cls, shape) -> DiagGaussian:
        return cls(np.zeros(shape), np.ones(shape))


@dataclass
class BernoulliP:
    p: Tensor

    def __post_init__(self):
        self.p = tn._wrap(self.p)
        if np.any((self.p.data < 0.0) | (self.p.data > 1.0)):
            raise DomainError("Bernoulli probability outside [0, 1]")


@dataclass
class CategoricalLogits:
    logits: Tensor

    def __post_init__(self):
        self.logits = tn._wrap(self.logits)
        if self.logits.ndim == 0 or self.logits.shape[-1] < 2:
            raise ShapeError("a categorical distribution needs at least two classes")

    @property
    def n_classes(self) -> int:
        return self.logits.shape[-1]

    def probs(self) -> Tensor:
        return tn.softmax_rows(self.logits)

    def expected_index(self) -> Tensor:
        """Mean class index, sum_k k * p(k)."""
        k = np.arange(self.n_classes, dtype=np.float64)
        return tn.sum_(self.probs() * k, axis=-1)


def gaussian_log_prob(z, g: DiagGaussian) -> Tensor:
    z = tn._wrap(z)
    if z.shape != g.mean.shape:
        raise ShapeError(f"sample shape {z.shape} does not match Gaussian shape {g.mean.shape}")
    if np.any(g.var.data <= 0.0):
        raise DomainError("Gaussian variance must be strictly positive")
    resid = z - g.mean
    per_coord = -0.5 * (tn.log(g.var) + LOG_2PI) - 0.5 * (resid * resid) / g.var
    return tn.sum_(per_coord, axis=-1)


def kl_vs_standard_normal(g: DiagGaussian) -> Tensor:
    """KL(g || N(0, I)), summed over the event axis."""
    if np.any(g.var.data <= 0.0):
        raise DomainError("Gaussian variance must be strictly positive")
    per_coord = 0.5 * (g.mean * g.mean + g.var - 1.0 - tn.log(g.var))
    return tn.sum_(per_coord, axis=-1)


def bernoulli_log_prob(t, b: BernoulliP) -> Tensor:
    """t log p + (1 - t) log(1 - p), with p clamped to [1e-7, 1 - 1e-7]."""
    t = np.asarray(t, dtype=np.float64)
    if not np.all((t == 0.0) | (t == 1.0)):
        raise DomainError("Bernoulli outcome must be 0 or 1")
    p = tn.clip(b.p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return t * tn.log(p) + (1.0 - t) * tn.log(1.0 - p)


def categorical_log_prob(y, c: CategoricalLogits) -> Tensor:
    y = np.asarray(y, dtype=np.int64)
    if np.any((y < 0) | (y >= c.n_classes)):
        raise IndexError(f"class index out of range [0, {c.n_classes})")
    return tn.pick(tn.log_softmax_rows(c.logits), y)


def reparam_sample(g: DiagGaussian, eps) -> Tensor:
    """mean + sqrt(var) * eps, differentiable in mean and var."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != g.mean.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match Gaussian shape {g.mean.shape}")
    return g.mean + tn.sqrt(g.var) * eps
