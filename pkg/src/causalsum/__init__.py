"""Causal video summarization on synthetic corpora, built on a small numpy autodiff engine."""
from .config import RunConfig
from .model import CausalModel, ModelConfig, causal_loss, causal_objective
from .summarize import evaluate_splits, f1, select_summary, segment_scores
from .synth import SynthConfig, generate_corpus, load_corpus, oracle_ate, save_corpus
from .tensor import Tensor, no_grad
from .training import TrainConfig, estimate_effect, predict_scores, train

__version__ = "0.1.0"

__all__ = [
    "CausalModel",
    "ModelConfig",
    "RunConfig",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "causal_loss",
    "causal_objective",
    "estimate_effect",
    "evaluate_splits",
    "f1",
    "generate_corpus",
    "load_corpus",
    "no_grad",
    "oracle_ate",
    "predict_scores",
    "save_corpus",
    "segment_scores",
    "select_summary",
    "train",
]
