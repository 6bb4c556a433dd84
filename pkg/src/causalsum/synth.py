"""Synthetic video-summarisation corpora with known causal structure.

Each frame carries a hidden confounder ``z*`` (an AR(1) process per video with
standard-normal marginals).  Observed features are ``x = A z* + noise`` and
the importance class is a binned ``b.z* + c.t + noise``.

Two modes:

``paper_protocol``
    Class labels do not depend on ``t``.  Half of the videos are selected, and
    30% of each selected video's frames get a random ``t``.  ``t = 1`` frames
    are blurred or salt-and-pepper corrupted and the video's query loses words.
``confounded``
    Every frame draws ``t ~ Bernoulli(sigmoid(s * a.z*))`` and the class
    depends on ``t``, so the average treatment effect is known and can be
    estimated by Monte Carlo with :func:`oracle_ate`.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from statistics import NormalDist

import numpy as np

from .errors import ConfigError, CorpusLoadError, DomainError, ModeError

PAPER_PROTOCOL = "paper_protocol"
CONFOUNDED = "confounded"
MODES = (PAPER_PROTOCOL, CONFOUNDED)
KINDS = ("none", "blur", "salt_pepper", "word_drop")
VISUAL_KINDS = ("blur", "salt_pepper")

CORPUS_FORMAT = "causalsum-corpus-1"
# image pipeline of the real-video setting; recorded, not synthesised
IMAGE_PROVENANCE = {
    "fps": 1,
    "image_size": [224, 224],
    "channel_mean": [0.4280, 0.4106, 0.3589],
    "channel_std": [0.2737, 0.2631, 0.2601],
}


def round_half_up(x: Fraction | float) -> int:
    return math.floor(Fraction(x) + Fraction(1, 2))


def _fraction(value: float) -> Fraction:
    # decimal reading, so 0.3 means 3/10 rather than its binary neighbour
    return Fraction(repr(float(value)))


@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 200
    min_frames: int = 60
    max_frames: int = 120
    d_v: int = 64
    n_classes: int = 4
    vocab_size: int = 100
    min_query_len: int = 3
    max_query_len: int = 8
    mode: str = PAPER_PROTOCOL
    latent_dim: int = 4
    temporal_corr: float = 0.8
    feature_noise: float = 0.5
    outcome_scale: float = 1.0
    outcome_noise: float = 0.5
    effect: float = 1.0
    outcome_offset: float = 0.0
    propensity_scale: float = 1.5
    structure_seed: int = 0
    video_fraction: float = 0.5
    frame_fraction: float = 0.3
    drop_prob: float = 0.2
    salt_pepper_fraction: float = 0.1
    blur_window: int = 3
    oracle_draws: int = 1_000_000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_videos < 1:
            raise ConfigError("n_videos must be at least 1")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ConfigError(f"invalid frame range [{self.min_frames}, {self.max_frames}]")
        if self.mode == PAPER_PROTOCOL and not 60 <= self.min_frames <= self.max_frames <= 600:
            raise ConfigError("paper_protocol videos last 60 to 600 frames")
        if self.d_v < 1 or self.latent_dim < 1:
            raise ConfigError("feature and latent dimensions must be positive")
        if self.n_classes < 2:
            raise ConfigError("need at least two outcome classes")
        if self.vocab_size < 1 or not 1 <= self.min_query_len <= self.max_query_len:
            raise ConfigError("invalid vocabulary or query length range")
        if not -1.0 < self.temporal_corr < 1.0:
            raise ConfigError("temporal_corr must lie in (-1, 1)")
        for name in ("feature_noise", "outcome_noise", "outcome_scale", "propensity_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("video_fraction", "frame_fraction", "drop_prob", "salt_pepper_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.blur_window < 1 or self.blur_window % 2 == 0:
            raise ConfigError("blur_window must be a positive odd integer")
        if self.oracle_draws < 1:
            raise ConfigError("oracle_draws must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class Structure:
    """Structural coefficients shared by every video of a configuration."""

    mixing: np.ndarray  # d_v x latent
    outcome_weights: np.ndarray  # latent
    propensity_weights: np.ndarray  # latent
    cutpoints: np.ndarray  # n_classes - 1


def structure(cfg: SynthConfig) -> Structure:
    rng = np.random.default_rng([cfg.structure_seed, 7])
    mixing = rng.normal(0.0, 1.0 / math.sqrt(cfg.latent_dim), size=(cfg.d_v, cfg.latent_dim))
    direction = rng.normal(size=cfg.latent_dim)
    direction /= np.linalg.norm(direction)
    spread = math.sqrt(cfg.outcome_scale**2 + cfg.outcome_noise**2) or 1.0
    unit = NormalDist()
    cutpoints = np.array([spread * unit.inv_cdf(k / cfg.n_classes) for k in range(1, cfg.n_classes)])
    return Structure(mixing, cfg.outcome_scale * direction, direction, cutpoints)


def outcome_class(cfg: SynthConfig, st: Structure, z: np.ndarray, t, noise) -> np.ndarray:
    """Bin b.z + c.t + offset + noise into classes 0..K-1."""
    latent = z @ st.outcome_weights + cfg.effect * np.asarray(t, dtype=np.float64) + cfg.outcome_offset
    return np.searchsorted(st.cutpoints, latent + cfg.outcome_noise * noise, side="right")


def propensity(cfg: SynthConfig, st: Structure, z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-cfg.propensity_scale * (z @ st.propensity_weights)))


@dataclass
class SyntheticVideo:
    video_id: str
    frames: np.ndarray  # n x d_v observed features
    query_tokens: np.ndarray
    gt_scores: np.ndarray  # class per frame
    t: np.ndarray  # -1 where no intervention label exists
    kind: tuple[str, ...]
    latent_z_star: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def records(self) -> list[InterventionRecord]:
        return [
            InterventionRecord(self.video_id, i, None if self.t[i] < 0 else int(self.t[i]), self.kind[i])
            for i in range(self.n_frames)
        ]


@dataclass(frozen=True)
class InterventionRecord:
    video_id: str
    frame_index: int
    t: int | None
    kind: str


@dataclass
class Corpus:
    cfg: SynthConfig
    seed: int
    videos: list[SyntheticVideo]
    oracle: dict | None = None

    @property
    def mode(self) -> str:
        return self.cfg.mode

    def records(self) -> list[InterventionRecord]:
        return [r for v in self.videos for r in v.records()]

    def video(self, video_id: str) -> SyntheticVideo:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise KeyError(video_id)


# ---------------------------------------------------------------- interventions


def blur(features: np.ndarray, window: int = 3) -> np.ndarray:
    """Moving average with mirrored edges (edge sample repeated)."""
    half = window // 2
    padded = np.pad(np.asarray(features, dtype=np.float64), half, mode="symmetric")
    return np.convolve(padded, np.full(window, 1.0 / window), mode="valid")


def salt_pepper(features: np.ndarray, rng: np.random.Generator, fraction: float = 0.1) -> np.ndarray:
    """Overwrite a fraction of coordinates with +/- the largest magnitude present."""
    out = np.array(features, dtype=np.float64)
    count = round_half_up(_fraction(fraction) * out.size)
    if count == 0:
        return out
    extreme = float(np.max(np.abs(out)))
    idx = rng.choice(out.size, size=count, replace=False)
    out[idx] = np.where(rng.random(count) < 0.5, extreme, -extreme)
    return out


def visual_intervention(
    features: np.ndarray,
    kind: str,
    rng: np.random.Generator,
    window: int = 3,
    fraction: float = 0.1,
) -> np.ndarray:
    if kind == "blur":
        return blur(features, window)
    if kind == "salt_pepper":
        return salt_pepper(features, rng, fraction)
    raise DomainError(f"unknown visual intervention {kind!r}")


def textual_intervention(tokens, rng: np.random.Generator, drop_prob: float = 0.2) -> np.ndarray:
    """Delete each token with probability ``drop_prob``; never return an empty query."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) == 0:
        raise DomainError("cannot perturb an empty query")
    keep = rng.random(len(tokens)) >= drop_prob
    if not keep.any():
        keep[rng.integers(len(tokens))] = True
    return tokens[keep]


def assign_interventions(corpus: Corpus, rng: np.random.Generator) -> Corpus:
    """Label and perturb frames following the 50% video / 30% frame protocol."""
    cfg = corpus.cfg
    if cfg.mode != PAPER_PROTOCOL:
        raise ModeError("intervention assignment applies to paper_protocol corpora only")
    n_sel = round_half_up(_fraction(cfg.video_fraction) * len(corpus.videos))
    chosen = set(rng.choice(len(corpus.videos), size=n_sel, replace=False).tolist())
    videos = []
    for vi, video in enumerate(corpus.videos):
        t = np.full(video.n_frames, -1, dtype=np.int64)
        kind = ["none"] * video.n_frames
        frames = video.frames.copy()
        query = video.query_tokens
        if vi in chosen:
            n_lab = round_half_up(_fraction(cfg.frame_fraction) * video.n_frames)
            labelled = np.sort(rng.choice(video.n_frames, size=n_lab, replace=False))
            t[labelled] = rng.integers(0, 2, size=n_lab)
            for fi in labelled:
                if t[fi] == 1:
                    kind[fi] = VISUAL_KINDS[rng.integers(len(VISUAL_KINDS))]
                    frames[fi] = visual_intervention(
                        frames[fi], kind[fi], rng, cfg.blur_window, cfg.salt_pepper_fraction
                    )
            if np.any(t == 1):
                query = textual_intervention(query, rng, cfg.drop_prob)
        videos.append(dataclasses.replace(video, frames=frames, query_tokens=query, t=t, kind=tuple(kind)))
    return dataclasses.replace(corpus, videos=videos)


# ---------------------------------------------------------------- generation


def _generate_video(cfg: SynthConfig, st: Structure, video_id: str, rng: np.random.Generator) -> SyntheticVideo:
    n = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
    rho = cfg.temporal_corr
    innovations = rng.standard_normal((n, cfg.latent_dim))
    z = np.empty_like(innovations)
    z[0] = innovations[0]
    for i in range(1, n):
        z[i] = rho * z[i - 1] + math.sqrt(1.0 - rho * rho) * innovations[i]
    frames = z @ st.mixing.T + cfg.feature_noise * rng.standard_normal((n, cfg.d_v))
    q_len = int(rng.integers(cfg.min_query_len, cfg.max_query_len + 1))
    query = rng.integers(0, cfg.vocab_size, size=q_len)
    if cfg.mode == CONFOUNDED:
        t = (rng.random(n) < propensity(cfg, st, z)).astype(np.int64)
    else:
        t = np.full(n, -1, dtype=np.int64)
    y = outcome_class(cfg, st, z, np.maximum(t, 0), rng.standard_normal(n))
    return SyntheticVideo(video_id, frames, query, y.astype(np.int64), t, ("none",) * n, z)


def generate_corpus(cfg: SynthConfig, seed: int, intervene: bool = True) -> Corpus:
    """Pure function of ``(cfg, seed)``.

    In paper_protocol mode interventions are assigned unless ``intervene`` is
    false; in confounded mode the oracle effect is attached.
    """
    st = structure(cfg)
    video_seeds = np.random.SeedSequence([seed, 1]).spawn(cfg.n_videos)
    width = len(str(cfg.n_videos - 1))
    videos = [
        _generate_video(cfg, st, f"v{i:0{width}d}", np.random.default_rng(s)) for i, s in enumerate(video_seeds)
    ]
    corpus = Corpus(cfg, seed, videos)
    if cfg.mode == PAPER_PROTOCOL and intervene:
        corpus = assign_interventions(corpus, np.random.default_rng([seed, 2]))
    if cfg.mode == CONFOUNDED:
        ate, stderr = oracle_ate(cfg, cfg.oracle_draws)
        corpus.oracle = {"ate": ate, "stderr": stderr, "n_mc": cfg.oracle_draws}
    return corpus


def oracle_ate(cfg: SynthConfig, n_mc: int = 1_000_000, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo E[class | do(t=1)] - E[class | do(t=0)] with its standard error.

    Both arms share the confounder and noise draws, so the standard error is
    that of the paired difference.
    """
    if cfg.mode != CONFOUNDED:
        raise ModeError("paper_protocol corpora define no structural effect of t on the outcome")
    if n_mc < 2:
        raise DomainError("oracle needs at least two draws")
    st = structure(cfg)
    rng = np.random.default_rng([cfg.structure_seed, seed, 11])
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_mc:
        m = min(250_000, n_mc - done)
        z = rng.standard_normal((m, cfg.latent_dim))
        noise = rng.standard_normal(m)
        diff = (outcome_class(cfg, st, z, 1, noise) - outcome_class(cfg, st, z, 0, noise)).astype(np.float64)
        total += diff.sum()
        total_sq += np.square(diff).sum()
        done += m
    mean = total / n_mc
    var = max(total_sq / n_mc - mean * mean, 0.0) * n_mc / (n_mc - 1)
    return float(mean), float(math.sqrt(var / n_mc))


# ---------------------------------------------------------------- serialisation


def encode_features(video_id: str, frames: np.ndarray) -> bytes:
    name = video_id.encode("utf-8")
    n, d = frames.shape
    return struct.pack("<I", len(name)) + name + struct.pack("<II", n, d) + frames.astype("<f8").tobytes()


def decode_features(blob: bytes, source: str = "<bytes>") -> tuple[str, np.ndarray]:
    try:
        (name_len,) = struct.unpack_from("<I", blob, 0)
        video_id = blob[4 : 4 + name_len].decode("utf-8")
        n, d = struct.unpack_from("<II", blob, 4 + name_len)
        start = 12 + name_len
        if len(blob) != start + 8 * n * d:
            raise ValueError(f"expected {n}x{d} floats, file holds {len(blob) - start} bytes of data")
        frames = np.frombuffer(blob, dtype="<f8", offset=start).reshape(n, d).astype(np.float64)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CorpusLoadError(f"{source}: malformed feature file ({exc})") from None
    return video_id, frames


def save_corpus(corpus: Corpus, out_dir) -> Path:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    videos_meta = []
    rows = io.StringIO(newline="")
    writer = csv.writer(rows, lineterminator="\n")
    writer.writerow(["video_id", "frame_index", "t", "kind", "y"])
    for v in corpus.videos:
        rel = f"features/{v.video_id}.bin"
        (out / rel).write_bytes(encode_features(v.video_id, v.frames))
        videos_meta.append(
            {
                "video_id": v.video_id,
                "n_frames": v.n_frames,
                "query": [int(x) for x in v.query_tokens],
                "features": rel,
            }
        )
        for i in range(v.n_frames):
            writer.writerow([v.video_id, i, "" if v.t[i] < 0 else int(v.t[i]), v.kind[i], int(v.gt_scores[i])])
    (out / "labels.csv").write_text(rows.getvalue(), encoding="utf-8")
    labelled = [v for v in corpus.videos if np.any(v.t >= 0)]
    meta = {
        "format": CORPUS_FORMAT,
        "seed": corpus.seed,
        "config": corpus.cfg.to_dict(),
        "counts": {
            "videos": len(corpus.videos),
            "frames": int(sum(v.n_frames for v in corpus.videos)),
            "videos_with_labels": len(labelled),
            "labelled_frames": int(sum(int(np.sum(v.t >= 0)) for v in corpus.videos)),
            "treated_frames": int(sum(int(np.sum(v.t == 1)) for v in corpus.videos)),
        },
        "oracle": corpus.oracle,
        "provenance": IMAGE_PROVENANCE,
        "videos": videos_meta,
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_corpus(in_dir) -> Corpus:
    root = Path(in_dir)
    meta_path = root / "metadata.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta.get("format") != CORPUS_FORMAT:
            raise ValueError(f"unexpected format tag {meta.get('format')!r}")
        cfg = SynthConfig(**meta["config"])
        entries = meta["videos"]
        seed = int(meta["seed"])
    except (OSError, ValueError, KeyError, TypeError, ConfigError) as exc:
        raise CorpusLoadError(f"{meta_path}: {exc}") from None

    labels_path = root / "labels.csv"
    per_video: dict[str, list[tuple[int, int, str, int]]] = {}
    try:
        with labels_path.open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                t = -1 if row["t"] == "" else int(row["t"])
                if row["kind"] not in KINDS:
                    raise ValueError(f"unknown kind {row['kind']!r}")
                per_video.setdefault(row["video_id"], []).append(
                    (int(row["frame_index"]), t, row["kind"], int(row["y"]))
                )
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CorpusLoadError(f"{labels_path}: {exc}") from None

    videos = []
    for entry in entries:
        path = root / entry["features"]
        try:
            blob = path.read_bytes()
        except OSError as exc:
            raise CorpusLoadError(f"{path}: {exc}") from None
        vid, frames = decode_features(blob, str(path))
        rows = sorted(per_video.get(vid, []))
        if vid != entry["video_id"] or len(frames) != entry["n_frames"] or len(rows) != len(frames):
            raise CorpusLoadError(f"{path}: does not match metadata/labels for video {entry['video_id']!r}")
        if frames.shape[1] != cfg.d_v:
            raise CorpusLoadError(f"{path}: feature width {frames.shape[1]} differs from d_v={cfg.d_v}")
        videos.append(
            SyntheticVideo(
                video_id=vid,
                frames=frames,
                query_tokens=np.asarray(entry["query"], dtype=np.int64),
                gt_scores=np.array([r[3] for r in rows], dtype=np.int64),
                t=np.array([r[1] for r in rows], dtype=np.int64),
                kind=tuple(r[2] for r in rows),
            )
        )
    return Corpus(cfg, seed, videos, meta.get("oracle"))


def corpus_digest(out_dir) -> str:
    """SHA-256 over every file of a saved corpus, in sorted path order."""
    h = hashlib.sha256()
    root = Path(out_dir)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()
