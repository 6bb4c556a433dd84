"""Shared test utilities: finite-difference gradient checks and tiny fixtures."""
from __future__ import annotations

import contextlib
import math

import numpy as np

from causalsum import nn as cnn
from causalsum import tensor as tn
from causalsum.dataset import Batch
from causalsum.model import CausalModel, ModelConfig

H = 1e-5
REL_TOL = 1e-4
# gradients smaller than this are compared on an absolute scale
GRAD_FLOOR = 1e-5
# comparisons that pass only because roundoff_floor raised the floor
ROUNDOFF_FLOORED: list[str] = []


class KinkCrossed(Exception):
    """A finite-difference probe took a different branch (relu sign, clip, top-k set)."""


class BranchGuard:
    """Records every piecewise decision made while evaluating a loss.

    The first recorded evaluation is the reference; ``evaluate`` raises
    KinkCrossed when a later evaluation branches differently, because central
    differences across a kink do not estimate the derivative.
    """

    def __init__(self):
        self.reference = None

    @contextlib.contextmanager
    def _recording(self, log):
        relu, clip, topk = cnn.relu, tn.clip, tn.topk_mask

        def rec_relu(x):
            x = tn._wrap(x)
            log.append(x.data > 0)
            return relu(x)

        def rec_clip(x, lo, hi):
            x = tn._wrap(x)
            log.append(np.stack([x.data < lo, x.data > hi]))
            return clip(x, lo, hi)

        def rec_topk(scores, kappa):
            out = topk(scores, kappa)
            log.append(np.isfinite(out.data))
            return out

        cnn.relu, tn.clip, tn.topk_mask = rec_relu, rec_clip, rec_topk
        try:
            yield
        finally:
            cnn.relu, tn.clip, tn.topk_mask = relu, clip, topk

    def evaluate(self, fn):
        log = []
        with self._recording(log):
            value = fn()
        if self.reference is None:
            self.reference = log
        elif len(log) != len(self.reference) or any(
            not np.array_equal(a, b) for a, b in zip(log, self.reference)
        ):
            raise KinkCrossed()
        return value


def rel_error(analytic, numeric, floor: float = GRAD_FLOOR) -> float:
    """Largest elementwise |a - n| / max(|a| + |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def roundoff_floor(loss_value: float, h: float = H) -> float:
    """Comparison floor that also covers the rounding noise of a central difference.

    Evaluating a loss of magnitude L carries a few ulps of error, so the
    difference quotient is only resolved to about 4 eps L / (2h).  Gradients
    below that level cannot be told apart from zero; dividing by REL_TOL turns
    the noise level into a floor for the relative comparison.  For losses of
    order 10 this is well below GRAD_FLOOR and changes nothing.
    """
    noise = 4.0 * np.finfo(np.float64).eps * abs(loss_value) / (2.0 * h)
    return max(GRAD_FLOOR, noise / REL_TOL)


def numeric_grad(f, arr: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        try:
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
        finally:
            flat[i] = old
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def check_op(build, inputs: list[np.ndarray], rng: np.random.Generator) -> float:
    """Gradient check of ``sum(w * build(*tensors))`` against every input."""
    tensors = [tn.tensor(x, requires_grad=True) for x in inputs]
    out = build(*tensors)
    w = rng.normal(size=out.shape)
    tn.sum_(out * w).backward()
    worst = 0.0
    for t, x in zip(tensors, inputs):

        def f():
            with tn.no_grad():
                return float(np.sum(build(*[tn.tensor(v) for v in inputs]).data * w))

        worst = max(worst, rel_error(t.grad, numeric_grad(f, x)))
    return worst


def _floored_error(name, analytic, numeric, floor) -> float:
    err = rel_error(analytic, numeric, floor)
    if err < REL_TOL <= rel_error(analytic, numeric):
        ROUNDOFF_FLOORED.append(name)
    return err


def _reference_guard(loss_fn) -> BranchGuard:
    """Guard whose reference is a no-grad evaluation, matching how the probes run.

    Graph construction may differ with gradients enabled (detached copies are
    only built when something requires grad), so the reference is never taken
    from the backward pass.
    """
    guard = BranchGuard()
    with tn.no_grad():
        guard.evaluate(loss_fn)
    return guard


def directional_check(loss_fn, params: list[tuple[str, tn.Tensor]], rng: np.random.Generator, h: float = H) -> dict:
    """Compare the analytic directional derivative with central differences, one random direction per group.

    ``loss_fn()`` must rebuild the graph and return a scalar Tensor.
    """
    guard = _reference_guard(loss_fn)
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    errors = {}
    for name, p in params:
        v = rng.normal(size=p.shape)
        g = np.zeros(p.shape) if p.grad is None else p.grad
        analytic = float(np.sum(g * v))
        base = p.data.copy()
        with tn.no_grad():
            try:
                p.data[...] = base + h * v
                up = float(guard.evaluate(loss_fn).data)
                p.data[...] = base - h * v
                down = float(guard.evaluate(loss_fn).data)
            finally:
                p.data[...] = base
        numeric = (up - down) / (2.0 * h)
        errors[name] = _floored_error(name, analytic, numeric, roundoff_floor(max(abs(up), abs(down)), h))
    return errors


def tiny_model_config(**overrides) -> ModelConfig:
    cfg = dict(
        d_v=4,
        n_classes=3,
        d_z=2,
        hidden=8,
        hidden_layers=2,
        multimodal=True,
        vocab_size=10,
        max_query_len=3,
        d_model=4,
        d_attn=4,
        d_fused=4,
    )
    cfg.update(overrides)
    return ModelConfig(**cfg)


def tiny_batch(rng: np.random.Generator, n: int = 2, d_v: int = 4, k: int = 3, vocab: int = 10, q_len: int = 3) -> Batch:
    t = np.arange(n) % 2
    return Batch(
        x=rng.normal(size=(n, d_v)),
        t=t,
        y=rng.integers(0, k, size=n),
        tokens=rng.integers(0, vocab, size=(n, q_len)),
        lengths=np.full(n, q_len),
    )


def perturb_params(model: CausalModel, rng: np.random.Generator, scale: float = 0.2) -> None:
    """Jitter every parameter around its initial value.

    Weights keep their Glorot draw; biases, gates and layer-norm parameters,
    which start at constants, receive the same additive noise so no group
    sits at a special point.
    """
    for _, p in model.named_parameters():
        p.data[...] += rng.normal(scale=scale, size=p.shape)


def model_gradient_errors(cfg: ModelConfig, draws: int, seed: int = 0, per_element_draws: int = 0) -> dict:
    """Worst relative error per parameter group over ``draws`` accepted parameter draws.

    Draws whose probes cross a kink are replaced and counted as rejected.

    With the helper stop-gradient active, extractor gradients are compared with
    differences of the loss minus the helper terms (the part that reaches the
    extractor); every other group is compared with the full loss.
    """
    from causalsum.model import causal_objective

    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    stop = cfg.helper_stop_gradient and cfg.multimodal
    accepted = rejected = 0
    floored_before = len(ROUNDOFF_FLOORED)
    while accepted < draws:
        model = CausalModel(cfg, seed=accepted + rejected)
        perturb_params(model, rng)
        batch = tiny_batch(rng, d_v=cfg.d_v, k=cfg.n_classes, vocab=cfg.vocab_size, q_len=cfg.max_query_len)
        eps = rng.standard_normal((len(batch), cfg.d_z))
        params = list(model.named_parameters())

        def full_loss():
            return causal_objective(model, batch, eps)[0]

        def elbo_loss():
            # adding the detached helper terms back cancels them from the value
            # without changing any extractor gradient
            return causal_objective(model, batch, eps)[0] + _helper_tensor(model, batch)

        groups = [
            (params_of(params, extractor=True), elbo_loss if stop else full_loss),
            (params_of(params, extractor=False), full_loss),
        ]
        errs: dict[str, float] = {}
        try:
            for subset, fn in groups:
                if not subset:
                    continue
                if accepted < per_element_draws:
                    errs.update(element_check(fn, subset))
                else:
                    errs.update(directional_check(fn, subset, rng))
        except KinkCrossed:
            rejected += 1
            continue
        accepted += 1
        for name, e in errs.items():
            worst[name] = max(worst.get(name, 0.0), e)
    return {"errors": worst, "accepted": accepted, "rejected": rejected, "roundoff_floored": len(ROUNDOFF_FLOORED) - floored_before}

def _helper_tensor(model: CausalModel, batch: Batch) -> tn.Tensor:
    """Batch mean of the helper log-likelihoods, evaluated on detached features."""
    from causalsum.distributions import bernoulli_log_prob, categorical_log_prob

    x = model.features(batch).detach()
    lt = bernoulli_log_prob(batch.t, model.helper_intervention(x))
    ly = categorical_log_prob(batch.y, model.helper_outcome(x, batch.t))
    return tn.mean(lt + ly)


def params_of(params, extractor: bool):
    return [(n, p) for n, p in params if n.startswith("extractor.") == extractor]


def element_check(loss_fn, params) -> dict:
    guard = _reference_guard(loss_fn)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    floor = roundoff_floor(loss.item())
    loss.backward()
    out = {}
    for name, p in params:
        g = np.zeros(p.shape) if p.grad is None else p.grad.copy()

        def f():
            with tn.no_grad():
                return float(guard.evaluate(loss_fn).data)

        out[name] = _floored_error(name, g, numeric_grad(f, p.data), floor)
    return out


# ---------------------------------------------------------------- selection oracles

def brute_force_best(scores, costs, budget):
    """Exact optimum of the 0/1 knapsack by enumerating every subset.

    Scores are scaled to exact integers first, so subset sums carry no rounding.
    """
    from fractions import Fraction

    ratios = [Fraction(float(s)) for s in scores]
    denom = math.lcm(*(r.denominator for r in ratios)) if ratios else 1
    values = [int(r * denom) for r in ratios]
    sums, weights = [0], [0]
    for v, c in zip(values, costs):
        sums = sums + [s + v for s in sums]
        weights = weights + [w + int(c) for w in weights]
    best = max(s for s, w in zip(sums, weights) if w <= budget)
    return Fraction(best, denom)


def exact_value(scores, selected):
    from fractions import Fraction

    return sum((Fraction(float(s)) for s, keep in zip(scores, selected) if keep), Fraction(0))


def brute_force_f1(pred_frames: set, gt_frames: set) -> float:
    if not pred_frames or not gt_frames:
        return 0.0
    overlap = len(pred_frames & gt_frames)
    if overlap == 0:
        return 0.0
    p = overlap / len(pred_frames)
    r = overlap / len(gt_frames)
    return 2.0 * p * r / (p + r)


def random_segments(rng, max_segments=15, seg_len=None):
    from causalsum.summarize import segment_scores

    n_seg = int(rng.integers(1, max_segments + 1))
    seg_len = int(rng.integers(1, 5)) if seg_len is None else seg_len
    n_frames = int(rng.integers((n_seg - 1) * seg_len + 1, n_seg * seg_len + 1))
    # coarse grid makes exact ties common so tie-breaking is exercised
    if rng.random() < 0.5:
        frames = rng.integers(0, 4, size=n_frames).astype(float)
    else:
        frames = rng.normal(size=n_frames)
    return segment_scores(frames, seg_len)


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE_LINES: list[str] = []


def report(number: int, title: str, ok: bool, detail: str) -> None:
    """Print and record one pass/fail line, then fail the test if needed."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'} {title}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line
