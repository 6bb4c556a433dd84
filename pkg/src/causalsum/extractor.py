"""Query/video fusion with row-wise top-k attention.

Pipeline: token embedding + sinusoidal positions -> dense attention
(A = softmax(QK^T / sqrt(d)), V_new = A V) -> top-k attention over V_new ->
layer norm, feed-forward, token mean-pool and a learned text gate -> gated
visual features -> concatenation and a fully connected layer.

Functions accept a single query (``n x d_m``) or a padded batch
(``B x n x d_m``) together with per-example token counts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import DomainError, ShapeError
from .nn import MLP, Linear, Module, glorot_uniform
from .tensor import Tensor


def sinusoidal_encoding(max_len: int, d_m: int) -> np.ndarray:
    """pe[p, 2i] = sin(p / 10000^(2i/d_m)), pe[p, 2i+1] = cos(same angle)."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    pair = np.arange(0, d_m, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, pair / d_m)
    pe = np.zeros((max_len, d_m))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_m // 2])
    return pe


def default_kappa(n_tokens) -> np.ndarray:
    """ceil(n / 2) clamped to [1, n]."""
    n = np.asarray(n_tokens, dtype=np.int64)
    return np.clip((n + 1) // 2, 1, np.maximum(n, 1))


@dataclass
class TokenMatrix:
    T: Tensor
    token_ids: np.ndarray

    @property
    def n_tokens(self) -> int:
        return len(self.token_ids)


def embed_query(token_ids, vocab_table: Tensor, max_len: int) -> TokenMatrix:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or len(ids) == 0:
        raise DomainError("a query needs at least one token")
    if len(ids) > max_len:
        raise DomainError(f"query has {len(ids)} tokens, maximum is {max_len}")
    vocab = vocab_table.shape[0]
    if np.any((ids < 0) | (ids >= vocab)):
        raise KeyError(f"token id outside vocabulary of size {vocab}")
    pe = sinusoidal_encoding(len(ids), vocab_table.shape[1])
    return TokenMatrix(tn.take_rows(vocab_table, ids) + pe, ids)


class AttentionWeights(Module):
    def __init__(self, d_m: int, d: int, rng: np.random.Generator, kappa: int | None = None):
        self.W_q = Tensor(glorot_uniform(rng, d_m, d), requires_grad=True)
        self.W_k = Tensor(glorot_uniform(rng, d_m, d), requires_grad=True)
        self.W_v = Tensor(glorot_uniform(rng, d_m, d), requires_grad=True)
        if kappa is not None and kappa < 1:
            raise DomainError(f"kappa must be >= 1, got {kappa}")
        self.kappa = kappa

    @property
    def d(self) -> int:
        return self.W_q.shape[1]


def _scaled_scores(T: Tensor, w: AttentionWeights, key_mask) -> tuple[Tensor, Tensor]:
    if T.shape[-1] != w.W_q.shape[0]:
        raise ShapeError(f"token width {T.shape[-1]} does not match projection {w.W_q.shape}")
    Q = tn.matmul(T, w.W_q)
    K = tn.matmul(T, w.W_k)
    V = tn.matmul(T, w.W_v)
    scores = tn.scale(tn.matmul(Q, tn.swap_last(K)), 1.0 / math.sqrt(w.d))
    if key_mask is not None:
        # padded key columns never receive weight
        scores = tn.masked_fill(scores, ~np.asarray(key_mask, dtype=bool)[..., None, :], -np.inf)
    return scores, V


def dense_attention(T, w: AttentionWeights, key_mask=None) -> tuple[Tensor, Tensor]:
    """Return the attention matrix and V_new = A V."""
    T = tn._wrap(T.T if isinstance(T, TokenMatrix) else T)
    scores, V = _scaled_scores(T, w, key_mask)
    A = tn.softmax_rows(scores)
    return A, tn.matmul(A, V)


def topk_mask(S, kappa) -> Tensor:
    return tn.topk_mask(S, kappa)


def causal_attention(T, w: AttentionWeights, key_mask=None, kappa=None, single_stage: bool = False) -> Tensor:
    """V_k = softmax(topk(QK^T / sqrt(d))) V_new.

    With ``single_stage`` the sparse weights multiply V instead of V_new.
    ``kappa`` defaults to ``w.kappa`` and then to ceil(n/2) per example.
    """
    T = tn._wrap(T.T if isinstance(T, TokenMatrix) else T)
    scores, V = _scaled_scores(T, w, key_mask)
    n_valid = np.asarray(key_mask).sum(axis=-1) if key_mask is not None else np.full(T.shape[:-2], T.shape[-2])
    if kappa is None:
        kappa = w.kappa
    kap = default_kappa(n_valid) if kappa is None else np.minimum(kappa, np.maximum(n_valid, 1))
    sparse = tn.softmax_rows(tn.topk_mask(scores, kap))
    if single_stage:
        return tn.matmul(sparse, V)
    V_new = tn.matmul(tn.softmax_rows(scores), V)
    return tn.matmul(sparse, V_new)


class FusionWeights(Module):
    def __init__(self, d: int, d_v: int, d_x: int, rng: np.random.Generator):
        self.ln_gain = Tensor(np.ones(d), requires_grad=True)
        self.ln_bias = Tensor(np.zeros(d), requires_grad=True)
        self.ffn = MLP([d, d, d], rng)
        self.text_gate = Tensor(np.ones(d), requires_grad=True)
        self.visual_gate = Tensor(np.ones(d_v), requires_grad=True)
        self.fc = Linear(d + d_v, d_x, rng)


def text_branch(V_k, fw: FusionWeights, token_mask=None) -> Tensor:
    """Gate times the token mean of FFN(LayerNorm(rows of V_k))."""
    V_k = tn._wrap(V_k)
    h = fw.ffn(tn.layer_norm(V_k, fw.ln_gain, fw.ln_bias))
    if token_mask is None:
        pooled = tn.mean(h, axis=-2)
    else:
        m = np.asarray(token_mask, dtype=np.float64)[..., None]
        pooled = tn.sum_(h * m, axis=-2) / m.sum(axis=-2)
    return pooled * fw.text_gate


def visual_branch(frame_features, fw: FusionWeights) -> Tensor:
    frame_features = tn._wrap(frame_features)
    if frame_features.shape[-1] != fw.visual_gate.shape[0]:
        raise ShapeError(f"frame features {frame_features.shape} do not match gate {fw.visual_gate.shape}")
    return frame_features * fw.visual_gate


def fuse(z_text, z_visual, fw: FusionWeights) -> Tensor:
    return fw.fc(tn.concat([tn._wrap(z_text), tn._wrap(z_visual)], axis=-1))


class SemanticsExtractor(Module):
    """Learned vocabulary table, attention weights and fusion layers."""

    def __init__(
        self,
        vocab_size: int,
        max_len: int,
        d_m: int,
        d: int,
        d_v: int,
        d_x: int,
        rng: np.random.Generator,
        kappa: int | None = None,
        single_stage: bool = False,
    ):
        self.vocab_table = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_m), size=(vocab_size, d_m)), requires_grad=True)
        self.attention = AttentionWeights(d_m, d, rng, kappa)
        self.fusion = FusionWeights(d, d_v, d_x, rng)
        self.max_len = max_len
        self.single_stage = single_stage
        self._pe = sinusoidal_encoding(max_len, d_m)

    def embed_padded(self, tokens: np.ndarray, lengths: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.shape[-1] > self.max_len:
            raise DomainError(f"query longer than {self.max_len} tokens")
        if np.any(np.asarray(lengths) < 1):
            raise DomainError("a query needs at least one token")
        n = tokens.shape[-1]
        return tn.take_rows(self.vocab_table, tokens) + self._pe[:n]

    def __call__(self, frames, tokens: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Fused features for a batch: frames ``B x d_v``, tokens ``B x L`` padded."""
        lengths = np.asarray(lengths, dtype=np.int64)
        mask = np.arange(np.asarray(tokens).shape[-1]) < lengths[..., None]
        T = self.embed_padded(tokens, lengths)
        V_k = causal_attention(T, self.attention, key_mask=mask, single_stage=self.single_stage)
        z_text = text_branch(V_k, self.fusion, token_mask=mask)
        z_visual = visual_branch(frames, self.fusion)
        return fuse(z_text, z_visual, self.fusion)
