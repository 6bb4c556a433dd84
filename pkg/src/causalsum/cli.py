"""Command-line entry point: ``synth``, ``train``, ``eval`` and ``summarize``.

Exit status is 0 on success, 2 on usage errors and 1 on runtime errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import FIELD_TYPES, RunConfig, build_run_config
from .dataset import examples_from_videos
from .errors import CheckpointError, ConfigError
from .model import CausalModel
from .summarize import budget_for, evaluate_splits, segment_scores, select_summary
from .synth import (
    CONFOUNDED,
    MODES,
    SynthConfig,
    decode_features,
    generate_corpus,
    load_corpus,
    oracle_ate,
    save_corpus,
)
from .training import EpochMetrics, estimate_effect, predict_scores, train

log = logging.getLogger("causalsum")


class UsageError(Exception):
    pass


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _run_config(args) -> RunConfig:
    overrides = {key: getattr(args, key, None) for key in FIELD_TYPES}
    return build_run_config(args.config, overrides)


def _model_config(run: RunConfig, corpus):
    cfg = corpus.cfg
    return run.model_config(cfg.d_v, cfg.n_classes, cfg.vocab_size, cfg.max_query_len)


def _fit(run: RunConfig, corpus, videos, seed: int | None = None):
    cfg = run.train_config()
    if seed is not None:
        cfg = type(cfg)(**{**cfg.__dict__, "seed": seed})
    data = examples_from_videos(videos, run.weak_supervision, run.segment_length)
    return train(data, _model_config(run, corpus), cfg)


def _scorer(model: CausalModel):
    def score(video):
        return predict_scores(model, examples_from_videos([video]).batch())

    return score


def _check_compatible(model: CausalModel, corpus) -> None:
    mc, cc = model.cfg, corpus.cfg
    if mc.d_v != cc.d_v or mc.n_classes != cc.n_classes:
        raise CheckpointError(
            f"checkpoint expects d_v={mc.d_v}, classes={mc.n_classes}; "
            f"corpus has d_v={cc.d_v}, classes={cc.n_classes}"
        )
    if mc.multimodal and (mc.vocab_size < cc.vocab_size or mc.max_query_len < cc.max_query_len):
        raise CheckpointError("checkpoint vocabulary or query length is smaller than the corpus's")


# ---------------------------------------------------------------- commands


_CORPUS_FILES = ("metadata.json", "labels.csv")


def cmd_synth(args) -> int:
    if args.videos < 1:
        raise UsageError("--videos must be at least 1")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
        for name in _CORPUS_FILES:
            (out / name).unlink(missing_ok=True)
        for path in (out / "features").glob("*.bin"):
            path.unlink()
    cfg = SynthConfig(
        n_videos=args.videos,
        mode=args.mode,
        min_frames=args.min_frames,
        max_frames=args.max_frames,
        d_v=args.d_v,
        n_classes=args.classes,
        oracle_draws=args.oracle_draws,
    )
    corpus = generate_corpus(cfg, args.seed)
    save_corpus(corpus, out)
    frames = sum(v.n_frames for v in corpus.videos)
    print(f"wrote {len(corpus.videos)} videos ({frames} frames) to {out} mode={cfg.mode} seed={args.seed}")
    if corpus.oracle is not None:
        print(f"oracle_ate={corpus.oracle['ate']!r} stderr={corpus.oracle['stderr']!r}")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args)
    corpus = load_corpus(args.corpus)
    result = _fit(run, corpus, corpus.videos)
    checkpoint.save(args.out, result.model, run.to_dict())
    metrics = args.metrics or f"{args.out}.metrics.csv"
    _write_csv(metrics, EpochMetrics.COLUMNS, [m.row() for m in result.trace])
    if result.trace:
        last = result.trace[-1]
        print(f"epoch {last.epoch} total={last.loss.total:.6f} helper_t_acc={last.helper_t_acc:.4f}")
    print(f"checkpoint={args.out} metrics={metrics}")
    return 0


def cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    if args.checkpoint:
        model, echo = checkpoint.load(args.checkpoint)
        _check_compatible(model, corpus)
        run = build_run_config(None, {k: v for k, v in echo.get("run", {}).items()})
        overrides = {k: getattr(args, k) for k in ("seed", "budget_fraction", "k_splits") if getattr(args, k) is not None}
        run = RunConfig(**{**run.to_dict(), **overrides})

        def train_fn(videos, split_seed):
            return _scorer(model)

    else:
        run = _run_config(args)

        def train_fn(videos, split_seed):
            return _scorer(_fit(run, corpus, videos, seed=split_seed).model)

    if run.threads > 1:
        pool = ThreadPoolExecutor(run.threads)
        map_fn = pool.map
    else:
        pool, map_fn = None, map
    try:
        report = evaluate_splits(
            corpus.videos,
            train_fn,
            k=run.k_splits,
            budget_fraction=run.budget_fraction,
            seed=run.seed,
            train_fraction=run.train_fraction,
            seg_len=run.segment_length,
            map_fn=map_fn,
        )
    finally:
        if pool is not None:
            pool.shutdown()

    doc = {
        "corpus": str(args.corpus),
        "mode": corpus.mode,
        "corpus_seed": corpus.seed,
        "seed": run.seed,
        "split_seeds": [run.seed * 1000 + r.split_id for r in report.rows],
        "k": run.k_splits,
        "train_fraction": run.train_fraction,
        "budget_fraction": run.budget_fraction,
        "retrained": not args.checkpoint,
        "splits": [
            {"split_id": r.split_id, "f1": r.f1, "baseline_f1": r.baseline_f1, "n_train": r.n_train, "n_test": r.n_test}
            for r in report.rows
        ],
        "mean_f1": report.mean_f1,
        "mean_baseline_f1": report.mean_baseline_f1,
        "config": run.to_dict(),
    }
    if args.ate or corpus.mode == CONFOUNDED:
        oracle = corpus.oracle
        if oracle is None:
            # raises the mode error for paper_protocol corpora
            ate, stderr = oracle_ate(corpus.cfg, corpus.cfg.oracle_draws)
            oracle = {"ate": ate, "stderr": stderr}
        model_for_ate = model if args.checkpoint else _fit(run, corpus, corpus.videos).model
        estimate = estimate_effect(
            model_for_ate, examples_from_videos(corpus.videos).batch(), run.effect_samples, run.seed
        )
        doc.update(
            ate_estimate=estimate,
            ate_oracle=oracle["ate"],
            ate_oracle_stderr=oracle["stderr"],
            abs_error=abs(estimate - oracle["ate"]),
        )
    if args.out:
        _write_json(args.out, doc)
    if args.table:
        _write_csv(args.table, ("split_id", "f1", "baseline_f1"), report.table())
    for split_id, f, b in report.table():
        print(f"split={split_id} f1={f:.4f} baseline_f1={b:.4f}")
    if "ate_estimate" in doc:
        print(f"ate_estimate={doc['ate_estimate']:.4f} ate_oracle={doc['ate_oracle']:.4f} abs_error={doc['abs_error']:.4f}")
    return 0


def cmd_summarize(args) -> int:
    model, echo = checkpoint.load(args.checkpoint)
    run = echo.get("run", {})
    seg_len = int(run.get("segment_length", 2))
    fraction = args.budget_fraction if args.budget_fraction is not None else float(run.get("budget_fraction", 0.15))
    if args.features:
        video_id, frames = decode_features(Path(args.features).read_bytes(), args.features)
        query = [int(tok) for tok in args.query.split()] if args.query else None
        if model.cfg.multimodal and not query:
            raise UsageError("this checkpoint was trained with text queries; pass --query")
    elif args.corpus and args.video_id:
        video = load_corpus(args.corpus).video(args.video_id)
        video_id, frames, query = video.video_id, video.frames, list(video.query_tokens)
    else:
        raise UsageError("give --features, or --corpus with --video-id")
    if frames.shape[1] != model.cfg.d_v:
        raise CheckpointError(f"features have width {frames.shape[1]}, checkpoint expects {model.cfg.d_v}")

    from .dataset import Batch

    n = len(frames)
    tokens = lengths = None
    if query:
        tokens = np.tile(np.asarray(query, dtype=np.int64), (n, 1))
        lengths = np.full(n, len(query))
    batch = Batch(frames, np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64), tokens, lengths)
    scores = predict_scores(model, batch)
    seg = segment_scores(scores, seg_len)
    budget = budget_for(n, fraction)
    sel = select_summary(seg, budget)
    print(
        f"video={video_id} frames={n} segments={seg.n_segments} budget={budget} "
        f"selected_frames={sel.total_selected_frames}"
    )
    starts = np.concatenate([[0], np.cumsum(seg.frame_counts)[:-1]])
    for i in sel.segments():
        print(f"segment={i} frames={starts[i]}-{starts[i] + seg.frame_counts[i] - 1} score={seg.scores[i]:.6f}")
    if args.trace:
        keep = sel.frame_mask()
        _write_csv(args.trace, ("frame", "score", "selected"), [(i, scores[i], int(keep[i])) for i in range(n)])
    return 0


# ---------------------------------------------------------------- parser


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    for key, kind in FIELD_TYPES.items():
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            p.add_argument(flag, dest=key, type=_bool_flag, default=None, metavar="BOOL")
        else:
            p.add_argument(flag, dest=key, type=kind, default=None)


def _bool_flag(text: str) -> bool:
    from .config import parse_value

    try:
        return parse_value("multimodal", text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causalsum", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=MODES, default="paper_protocol")
    p.add_argument("--min-frames", type=int, default=60)
    p.add_argument("--max-frames", type=int, default=120)
    p.add_argument("--d-v", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--oracle-draws", type=int, default=1_000_000)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a corpus and write a checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="per-epoch CSV (default: <out>.metrics.csv)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="five-split F1 evaluation and effect estimate")
    p.add_argument("--corpus", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--retrain-per-split", action="store_true")
    p.add_argument("--ate", action="store_true", help="also estimate the intervention effect")
    p.add_argument("--out", help="metrics document (JSON)")
    p.add_argument("--table", help="per-split F1 table (CSV)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("summarize", help="select a budgeted summary for one video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", help="binary per-video feature file")
    p.add_argument("--query", help="space-separated token ids")
    p.add_argument("--corpus")
    p.add_argument("--video-id")
    p.add_argument("--budget-fraction", type=float)
    p.add_argument("--trace", help="write per-frame scores and selection (CSV)")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"causalsum {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported, not swallowed
        if args.verbose:
            raise
        print(f"causalsum {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
