"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import OptimizerError
from .tensor import Tensor

DEFAULT_LEARNING_RATE = 1e-6
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPS
    learning_rate: float = DEFAULT_LEARNING_RATE

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper) -> AdamState:
        return cls(
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            **hyper,
        )


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    names: Sequence[str] | None = None,
) -> None:
    """Update ``params`` in place and advance ``state`` by one step.

    A ``None`` gradient counts as zero.  Non-finite gradients abort the whole
    step before any parameter is touched.
    """
    if state.learning_rate <= 0:
        raise OptimizerError(f"learning rate must be positive, got {state.learning_rate}")
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise OptimizerError("parameter, gradient and moment lists differ in length")
    names = list(names) if names is not None else [f"param[{i}]" for i in range(len(params))]
    for name, p, g, m in zip(names, params, grads, state.first_moment):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise OptimizerError(f"shape mismatch for parameter group '{name}': {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient in parameter group '{name}'")

    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step_count
    c2 = 1.0 - b2**state.step_count
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = 0.0
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Optimizer over named parameter tensors, reading their ``.grad``.

    Parameter arrays are re-homed as views into one contiguous buffer so a
    step is a few vector operations regardless of the number of groups.
    """

    def __init__(
        self,
        named_params: Iterable[tuple[str, Tensor]],
        lr: float = DEFAULT_LEARNING_RATE,
        betas: tuple[float, float] = (DEFAULT_BETA1, DEFAULT_BETA2),
        eps: float = DEFAULT_EPS,
    ):
        pairs = list(named_params)
        self.names = [n for n, _ in pairs]
        self.params = [p for _, p in pairs]
        sizes = [p.size for p in self.params]
        self._bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self._flat = np.concatenate([p.data.ravel() for p in self.params]) if pairs else np.zeros(0)
        for p, a, b in zip(self.params, self._bounds[:-1], self._bounds[1:]):
            p.data = self._flat[a:b].reshape(p.shape)
        self.state = AdamState.zeros_like(
            [self._flat],
            beta1=betas[0],
            beta2=betas[1],
            eps=eps,
            learning_rate=lr,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _flat_grad(self) -> np.ndarray:
        g = np.zeros_like(self._flat)
        for p, a, b in zip(self.params, self._bounds[:-1], self._bounds[1:]):
            if p.grad is not None:
                g[a:b] = p.grad.ravel()
        return g

    def step(self) -> None:
        g = self._flat_grad()
        if not np.all(np.isfinite(g)):
            for name, a, b in zip(self.names, self._bounds[:-1], self._bounds[1:]):
                if not np.all(np.isfinite(g[a:b])):
                    raise OptimizerError(f"non-finite gradient in parameter group '{name}'")
        adam_step([self._flat], [g], self.state, ["all"])
