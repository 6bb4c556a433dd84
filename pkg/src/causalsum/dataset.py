"""Training records: one per frame, with the video's query attached."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError
from .summarize import segment_scores, broadcast_to_frames


@dataclass(frozen=True)
class Example:
    x: np.ndarray
    t: int
    y: int
    frame_id: int
    video_id: str
    tokens: np.ndarray | None = None

    def __post_init__(self):
        if self.t not in (0, 1):
            raise DomainError(f"intervention must be 0 or 1, got {self.t}")
        if not np.all(np.isfinite(self.x)):
            raise DomainError("example features must be finite")


@dataclass
class Batch:
    x: np.ndarray  # B x d_v
    t: np.ndarray  # B
    y: np.ndarray  # B
    tokens: np.ndarray | None = None  # B x L, zero padded
    lengths: np.ndarray | None = None  # B

    def __len__(self) -> int:
        return len(self.x)


class ExampleSet:
    """Column-stored frames; ``batch(idx)`` gathers rows for training."""

    def __init__(self, x, t, y, video_index, frame_index, video_ids: Sequence[str], queries: Sequence | None = None):
        self.x = np.asarray(x, dtype=np.float64)
        self.t = np.asarray(t, dtype=np.int64)
        self.y = np.asarray(y, dtype=np.int64)
        self.video_index = np.asarray(video_index, dtype=np.int64)
        self.frame_index = np.asarray(frame_index, dtype=np.int64)
        self.video_ids = list(video_ids)
        n = len(self.x)
        if not (len(self.t) == len(self.y) == len(self.video_index) == len(self.frame_index) == n):
            raise DomainError("example columns differ in length")
        if n and not np.all(np.isin(self.t, (0, 1))):
            raise DomainError("interventions must be 0 or 1")
        if not np.all(np.isfinite(self.x)):
            raise DomainError("example features must be finite")
        self.queries = None
        self.query_lengths = None
        if queries is not None:
            lengths = np.array([len(q) for q in queries], dtype=np.int64)
            padded = np.zeros((len(queries), max(1, lengths.max(initial=1))), dtype=np.int64)
            for i, q in enumerate(queries):
                padded[i, : len(q)] = q
            self.queries = padded
            self.query_lengths = lengths

    def __len__(self) -> int:
        return len(self.x)

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    def __getitem__(self, i: int) -> Example:
        v = self.video_index[i]
        tokens = None if self.queries is None else self.queries[v, : self.query_lengths[v]]
        return Example(self.x[i], int(self.t[i]), int(self.y[i]), int(self.frame_index[i]), self.video_ids[v], tokens)

    def batch(self, idx=None) -> Batch:
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        tokens = lengths = None
        if self.queries is not None:
            v = self.video_index[idx]
            tokens, lengths = self.queries[v], self.query_lengths[v]
        return Batch(self.x[idx], self.t[idx], self.y[idx], tokens, lengths)

    def subset(self, video_positions: Sequence[int]) -> ExampleSet:
        keep = np.isin(self.video_index, np.asarray(video_positions))
        return ExampleSet(
            self.x[keep],
            self.t[keep],
            self.y[keep],
            self.video_index[keep],
            self.frame_index[keep],
            self.video_ids,
            None if self.queries is None else [self.queries[v, : self.query_lengths[v]] for v in range(len(self.video_ids))],
        )


def weak_labels(gt_scores: np.ndarray, seg_len: int = 2) -> np.ndarray:
    """Segment means broadcast back to frames and rounded half up to a class."""
    means = broadcast_to_frames(segment_scores(gt_scores, seg_len))
    return np.floor(means + 0.5).astype(np.int64)


def examples_from_videos(videos, weak_supervision: bool = False, seg_len: int = 2) -> ExampleSet:
    """Frames without an intervention label count as untreated (t = 0)."""
    xs, ts, ys, vis, fis = [], [], [], [], []
    for vi, v in enumerate(videos):
        n = v.n_frames
        xs.append(v.frames)
        ts.append(np.maximum(np.asarray(v.t), 0))
        ys.append(weak_labels(v.gt_scores, seg_len) if weak_supervision else np.asarray(v.gt_scores))
        vis.append(np.full(n, vi))
        fis.append(np.arange(n))
    return ExampleSet(
        np.concatenate(xs),
        np.concatenate(ts),
        np.concatenate(ys),
        np.concatenate(vis),
        np.concatenate(fis),
        [v.video_id for v in videos],
        [np.asarray(v.query_tokens) for v in videos],
    )
