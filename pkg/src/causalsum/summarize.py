"""Segment scoring, budgeted summary selection and F1 evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class SegmentScores:
    scores: np.ndarray
    segment_length: int
    frame_counts: np.ndarray

    @property
    def n_segments(self) -> int:
        return len(self.scores)

    @property
    def n_frames(self) -> int:
        return int(self.frame_counts.sum())


@dataclass(frozen=True)
class SummarySelection:
    selected: np.ndarray  # bool per segment
    budget_frames: int
    frame_counts: np.ndarray

    @property
    def total_selected_frames(self) -> int:
        return int(self.frame_counts[self.selected].sum())

    def frame_mask(self) -> np.ndarray:
        return np.repeat(self.selected, self.frame_counts)

    def segments(self) -> list[int]:
        return np.flatnonzero(self.selected).tolist()


def segment_scores(frame_scores, seg_len: int = 2) -> SegmentScores:
    """Mean frame score per consecutive window of ``seg_len`` frames."""
    s = np.asarray(frame_scores, dtype=np.float64)
    if s.ndim != 1 or len(s) == 0:
        raise DomainError("need a non-empty 1-D sequence of frame scores")
    if seg_len < 1:
        raise DomainError("segment length must be at least 1")
    if not np.all(np.isfinite(s)):
        raise DomainError("frame scores must be finite")
    starts = np.arange(0, len(s), seg_len)
    counts = np.minimum(seg_len, len(s) - starts)
    means = np.add.reduceat(s, starts) / counts
    return SegmentScores(means, seg_len, counts)


def broadcast_to_frames(seg: SegmentScores) -> np.ndarray:
    return np.repeat(seg.scores, seg.frame_counts)


def budget_for(n_frames: int, fraction: float) -> int:
    """floor(fraction * n_frames), reading ``fraction`` as the decimal it prints as."""
    if fraction < 0:
        raise DomainError("budget fraction must be non-negative")
    return math.floor(Fraction(repr(float(fraction))) * n_frames)


def _exact_integers(values: np.ndarray) -> list[int]:
    """Scale floats by a common power of two so they become exact integers."""
    ratios = [float(v).as_integer_ratio() for v in values]
    denom = max((d for _, d in ratios), default=1)
    return [n * (denom // d) for n, d in ratios]


def select_summary(seg: SegmentScores, budget_frames: int) -> SummarySelection:
    """Exact 0/1 knapsack over segments: maximise total score within the frame budget.

    Values are compared in exact integer arithmetic.  Among optimal sets the
    one including lower-indexed segments is preferred.  A budget covering the
    whole video selects every segment, even ones with negative scores.
    """
    if budget_frames < 0:
        raise DomainError("budget must be non-negative")
    n = seg.n_segments
    if budget_frames >= seg.n_frames:
        return SummarySelection(np.ones(n, dtype=bool), int(budget_frames), seg.frame_counts.copy())
    cap = int(min(budget_frames, seg.n_frames))
    values = _exact_integers(seg.scores)
    costs = [int(c) for c in seg.frame_counts]
    # best[i][b]: optimum over segments i.. with capacity b
    best = [[0] * (cap + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        nxt, row, c, v = best[i + 1], best[i], costs[i], values[i]
        for b in range(cap + 1):
            skip = nxt[b]
            row[b] = max(skip, nxt[b - c] + v) if c <= b else skip
    selected = np.zeros(n, dtype=bool)
    b = cap
    for i in range(n):
        c = costs[i]
        if c <= b and best[i + 1][b - c] + values[i] == best[i][b]:
            selected[i] = True
            b -= c
    return SummarySelection(selected, int(budget_frames), seg.frame_counts.copy())


def selection_value(seg: SegmentScores, sel: SummarySelection) -> float:
    return math.fsum(seg.scores[sel.selected])


def f1(pred: SummarySelection, gt: SummarySelection) -> float:
    """Harmonic mean of frame-overlap precision and recall; 0 if either is empty."""
    if not np.array_equal(pred.frame_counts, gt.frame_counts):
        raise ShapeError("selections are over different segmentations")
    p_frames = pred.total_selected_frames
    g_frames = gt.total_selected_frames
    if p_frames == 0 or g_frames == 0:
        return 0.0
    overlap = int(pred.frame_counts[pred.selected & gt.selected].sum())
    if overlap == 0:
        return 0.0
    precision = overlap / p_frames
    recall = overlap / g_frames
    return 2.0 * precision * recall / (precision + recall)


def summarize_scores(frame_scores, budget_fraction: float, seg_len: int = 2) -> tuple[SegmentScores, SummarySelection]:
    seg = segment_scores(frame_scores, seg_len)
    return seg, select_summary(seg, budget_for(seg.n_frames, budget_fraction))


# ---------------------------------------------------------------- split protocol

Scorer = Callable[[object], np.ndarray]


@dataclass
class SplitRow:
    split_id: int
    f1: float
    baseline_f1: float
    n_train: int
    n_test: int


@dataclass
class SplitReport:
    rows: list[SplitRow]
    seed: int
    budget_fraction: float
    train_fraction: float
    test_ids: list[list[str]] = field(default_factory=list)

    @property
    def mean_f1(self) -> float:
        return float(np.mean([r.f1 for r in self.rows]))

    @property
    def mean_baseline_f1(self) -> float:
        return float(np.mean([r.baseline_f1 for r in self.rows]))

    def table(self) -> list[tuple]:
        """k split rows followed by one ``mean`` row."""
        out = [(r.split_id, r.f1, r.baseline_f1) for r in self.rows]
        out.append(("mean", self.mean_f1, self.mean_baseline_f1))
        return out


def split_indices(n: int, k: int, seed: int, train_fraction: float = 0.8) -> list[tuple[np.ndarray, np.ndarray]]:
    """k independent seeded random train/test partitions of ``range(n)``."""
    if n < k:
        raise DomainError(f"need at least {k} videos for {k} splits, got {n}")
    n_train = math.floor(Fraction(repr(float(train_fraction))) * n + Fraction(1, 2))
    n_train = min(max(n_train, 1), n - 1)
    out = []
    for s in range(k):
        perm = np.random.default_rng([seed, s, 5]).permutation(n)
        out.append((np.sort(perm[:n_train]), np.sort(perm[n_train:])))
    return out


def evaluate_splits(
    videos: Sequence,
    train_fn: Callable[[list, int], Scorer],
    k: int = 5,
    budget_fraction: float = 0.15,
    seed: int = 0,
    train_fraction: float = 0.8,
    seg_len: int = 2,
    map_fn: Callable = map,
) -> SplitReport:
    """Train on each split's training videos and score F1 on its test videos.

    ``train_fn(train_videos, split_seed)`` returns a scorer mapping a video to
    per-frame scores.  Ground truth is the same knapsack applied to the
    annotated frame scores.  The random baseline draws uniform segment scores
    from a generator seeded by the split.
    """
    videos = list(videos)
    splits = split_indices(len(videos), k, seed, train_fraction)

    def run(item):
        split_id, (train_idx, test_idx) = item
        scorer = train_fn([videos[i] for i in train_idx], seed * 1000 + split_id)
        rng = np.random.default_rng([seed, split_id, 9])
        f1s, base = [], []
        for i in test_idx:
            v = videos[i]
            budget = budget_for(v.n_frames, budget_fraction)
            gt_seg = segment_scores(v.gt_scores, seg_len)
            gt = select_summary(gt_seg, budget)
            pred = select_summary(segment_scores(scorer(v), seg_len), budget)
            rand_seg = SegmentScores(rng.random(gt_seg.n_segments), seg_len, gt_seg.frame_counts)
            f1s.append(f1(pred, gt))
            base.append(f1(select_summary(rand_seg, budget), gt))
        row = SplitRow(split_id, float(np.mean(f1s)), float(np.mean(base)), len(train_idx), len(test_idx))
        return row, [videos[i].video_id for i in test_idx]

    results = list(map_fn(run, enumerate(splits)))
    return SplitReport(
        [r for r, _ in results], seed, budget_fraction, train_fraction, [ids for _, ids in results]
    )
