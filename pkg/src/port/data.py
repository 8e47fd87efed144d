"""Annotation ingestion, timeline mapping, labels, synthetic data, file I/O.

Timeline convention: a video of duration_s seconds is represented by T
feature rows; time tau maps to index round-half-up(tau / duration_s * T)
clamped into [0, T), and index i maps back to i / T * duration_s.  For
padded videos every mapping uses the valid (effective) length, never the
padded length, so supervision and features share one timeline.

The synthetic generator plants a query-derived unit signal vector in the
in-moment frames and pure noise elsewhere.  Query tokens embed through a
hash, so any process reconstructs the same query matrix from the stored
text alone; the token -> signal map is a fixed random projection drawn once
per dataset seed, making the task learnable across samples.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"PORTFEAT"
FEATURE_VERSION = 1

SECONDS_PER_RAW_STEP = 0.5


class FeatureFileError(Exception):
    """Base class for feature-file parsing failures."""


class BadMagicError(FeatureFileError):
    pass


class BadVersionError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class AnnotationError(ValueError):
    """Raised for malformed annotation records; carries the line number."""


@dataclass
class Annotation:
    """One grounding instance: a video, a moment, a query."""

    video_id: str
    duration_s: float
    start_s: float
    end_s: float
    query: str

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError(f"duration_s must be > 0, got {self.duration_s}")
        if not 0 <= self.start_s <= self.end_s <= self.duration_s:
            raise ValueError(
                f"need 0 <= start <= end <= duration, got "
                f"start={self.start_s} end={self.end_s} duration={self.duration_s}"
            )


@dataclass
class SpanLabels:
    """Supervision targets for one sample on the effective timeline."""

    i_s: int
    i_e: int
    y_start: np.ndarray
    y_end: np.ndarray
    y_highlight: np.ndarray
    valid_mask: np.ndarray


@dataclass
class SyntheticConfig:
    """Knobs for the synthetic corpus generator."""

    num_samples: int = 1000
    t_raw_min: int = 32
    t_raw_max: int = 128
    d_v: int = 64
    d_w: int = 50
    n_tokens_min: int = 3
    n_tokens_max: int = 10
    snr: float = 4.0
    moment_ratio_mean: float = 0.19
    position_mode: str = "uniform"
    seed: int = 0
    vocab_size: int = 4096

    def __post_init__(self):
        if not 0.0 < self.moment_ratio_mean < 0.5:
            # uniform mode draws lengths from U(0, 2*mean), which must stay < 1
            raise ValueError(
                f"moment_ratio_mean must be in (0, 0.5), got {self.moment_ratio_mean}"
            )
        if self.position_mode not in ("uniform", "biased"):
            raise ValueError(f"position_mode must be uniform or biased, got {self.position_mode}")
        if self.t_raw_min < 1 or self.t_raw_max < self.t_raw_min:
            raise ValueError("need 1 <= t_raw_min <= t_raw_max")


@dataclass
class SyntheticSample:
    features: np.ndarray  # [T_raw, d_v] float32
    query: np.ndarray  # [N, d_w] float32
    annotation: Annotation


# timeline mapping


def time_to_index(tau: float, duration: float, T: int) -> int:
    """Round-half-up of tau / duration * T, clamped into [0, T-1]."""
    if duration <= 0:
        raise ValueError(f"duration must be > 0, got {duration}")
    i = math.floor(tau / duration * T + 0.5)
    return min(max(i, 0), T - 1)


def index_to_time(i: int, T: int, duration: float) -> float:
    """Left edge of frame i in seconds: i / T * duration."""
    return i / T * duration


def resample_features(raw: np.ndarray, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Fit a [T0, d] feature matrix into exactly T rows.

    Long inputs are uniformly subsampled at indices floor(k*T0/T); short
    inputs are copied and zero-padded.  Returns (features [T, d], boolean
    valid mask [T]).
    """
    raw = np.asarray(raw)
    T0, d = raw.shape
    if T0 > T:
        idx = (np.arange(T) * T0) // T
        return raw[idx].astype(np.float32), np.ones(T, dtype=bool)
    out = np.zeros((T, d), dtype=np.float32)
    out[:T0] = raw
    mask = np.zeros(T, dtype=bool)
    mask[:T0] = True
    return out, mask


def make_labels(ann: Annotation, t_effective: int, t_total: int | None = None) -> SpanLabels:
    """Boundary indices, one-hots, and the foreground mask for one sample.

    ``t_effective`` is the number of real (unpadded) frames; arrays are
    padded out to ``t_total`` when given.  The foreground mask is 1 exactly
    on [i_s, i_e], with no widening of the target region.
    """
    if ann.start_s > ann.end_s:
        raise ValueError(f"start {ann.start_s} after end {ann.end_s}")
    T = t_total if t_total is not None else t_effective
    if t_effective > T:
        raise ValueError(f"effective length {t_effective} exceeds total {T}")
    i_s = time_to_index(ann.start_s, ann.duration_s, t_effective)
    i_e = time_to_index(ann.end_s, ann.duration_s, t_effective)
    y_start = np.zeros(T, dtype=np.float32)
    y_end = np.zeros(T, dtype=np.float32)
    y_start[i_s] = 1.0
    y_end[i_e] = 1.0
    y_highlight = np.zeros(T, dtype=np.float32)
    y_highlight[i_s : i_e + 1] = 1.0
    valid = np.zeros(T, dtype=bool)
    valid[:t_effective] = True
    return SpanLabels(i_s, i_e, y_start, y_end, y_highlight, valid)


# query embedding


def hash_embedding(token: str, dim: int) -> np.ndarray:
    """Deterministic unit vector for a token, stable across runs and hosts."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


def embed_query(query: str, dim: int) -> np.ndarray:
    """Whitespace-tokenized hash embedding matrix [N, dim] for a query."""
    tokens = query.split()
    if not tokens:
        raise ValueError("query has no tokens")
    return np.stack([hash_embedding(t, dim) for t in tokens])


def _signal_projection(seed: int, d_w: int, d_v: int) -> np.ndarray:
    """Fixed random map from query space to video space, one per dataset seed."""
    rng = np.random.default_rng([seed, 51915])
    return rng.standard_normal((d_w, d_v)).astype(np.float32)


def query_signal(query: str, d_w: int, d_v: int, seed: int) -> np.ndarray:
    """Unit video-space vector planted in the frames a query refers to."""
    pooled = embed_query(query, d_w).mean(axis=0)
    v = pooled @ _signal_projection(seed, d_w, d_v)
    return (v / np.linalg.norm(v)).astype(np.float32)


# synthetic generation


def _draw_moment(rng: np.random.Generator, cfg: SyntheticConfig) -> tuple[float, float]:
    """Normalized (start, length) of the target moment per position mode."""
    m = cfg.moment_ratio_mean
    if cfg.position_mode == "uniform":
        length = rng.uniform(0.0, 2.0 * m)
        start = rng.uniform(0.0, 1.0 - length)
    else:
        # biased toward early starts and short moments
        length = 2.0 * m * rng.random() ** 2
        start = (1.0 - length) * rng.random() ** 2
    return start, length


def generate_synthetic(cfg: SyntheticConfig) -> list[SyntheticSample]:
    """Deterministic synthetic corpus; per-sample RNG keyed by (seed, index)."""
    projection = _signal_projection(cfg.seed, cfg.d_w, cfg.d_v)
    samples = []
    for idx in range(cfg.num_samples):
        rng = np.random.default_rng([cfg.seed, idx])
        t_raw = int(rng.integers(cfg.t_raw_min, cfg.t_raw_max + 1))
        duration = t_raw * SECONDS_PER_RAW_STEP
        start_n, length_n = _draw_moment(rng, cfg)
        start_s = start_n * duration
        end_s = min((start_n + length_n) * duration, duration)
        n_tokens = int(rng.integers(cfg.n_tokens_min, cfg.n_tokens_max + 1))
        token_ids = rng.integers(0, cfg.vocab_size, size=n_tokens)
        query = " ".join(f"t{t}" for t in token_ids)
        q_mat = embed_query(query, cfg.d_w)
        sig = q_mat.mean(axis=0) @ projection
        sig = sig / np.linalg.norm(sig)
        noise_scale = 1.0 / cfg.snr
        feats = rng.normal(0.0, noise_scale, size=(t_raw, cfg.d_v))
        lo = time_to_index(start_s, duration, t_raw)
        hi = time_to_index(end_s, duration, t_raw)
        feats[lo : hi + 1] += sig
        ann = Annotation(f"v{idx:06d}", duration, start_s, end_s, query)
        samples.append(SyntheticSample(feats.astype(np.float32), q_mat, ann))
    return samples


# binary feature files


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_features(path, features: np.ndarray) -> None:
    """Serialize a [T, d] float32 matrix; atomic via temp-file + rename."""
    features = np.ascontiguousarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {features.shape}")
    T, d = features.shape
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, T, d)
    payload = features.astype("<f4").tobytes(order="C")
    _atomic_write_bytes(Path(path), header + payload)


def read_features(path) -> np.ndarray:
    """Parse a feature file; raises distinct errors for each corruption kind."""
    blob = Path(path).read_bytes()
    if len(blob) < len(FEATURE_MAGIC) + 12:
        raise TruncatedFileError(f"{path}: header incomplete ({len(blob)} bytes)")
    if blob[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:len(FEATURE_MAGIC)]!r}")
    version, T, d = struct.unpack_from("<III", blob, len(FEATURE_MAGIC))
    if version != FEATURE_VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    body = blob[len(FEATURE_MAGIC) + 12 :]
    expected = T * d * 4
    if len(body) != expected:
        raise TruncatedFileError(f"{path}: payload {len(body)} bytes, expected {expected}")
    return np.frombuffer(body, dtype="<f4").reshape(T, d).copy()


# annotation JSONL

_ANNOTATION_KEYS = {"video_id", "duration_s", "start_s", "end_s", "query"}


def load_annotations(path) -> list[Annotation]:
    """Parse UTF-8 JSONL annotations, validating each record.

    Errors carry the 1-based line number.  Key set must match exactly.
    """
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise AnnotationError(f"{path}:{lineno}: invalid JSON ({e})") from None
            if not isinstance(rec, dict) or set(rec) != _ANNOTATION_KEYS:
                raise AnnotationError(
                    f"{path}:{lineno}: keys must be exactly {sorted(_ANNOTATION_KEYS)}"
                )
            try:
                ann = Annotation(
                    video_id=str(rec["video_id"]),
                    duration_s=float(rec["duration_s"]),
                    start_s=float(rec["start_s"]),
                    end_s=float(rec["end_s"]),
                    query=str(rec["query"]),
                )
            except (TypeError, ValueError) as e:
                raise AnnotationError(f"{path}:{lineno}: {e}") from None
            out.append(ann)
    return out


def write_annotations(anns: list[Annotation], path) -> None:
    lines = []
    for a in anns:
        lines.append(
            json.dumps(
                {
                    "video_id": a.video_id,
                    "duration_s": a.duration_s,
                    "start_s": a.start_s,
                    "end_s": a.end_s,
                    "query": a.query,
                },
                ensure_ascii=False,
            )
        )
    _atomic_write_bytes(Path(path), ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


def write_dataset(samples: list[SyntheticSample], out_dir) -> Path:
    """Write annotations.jsonl plus one <video_id>.pft per sample; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_features(out / f"{s.annotation.video_id}.pft", s.features)
    manifest = out / "annotations.jsonl"
    write_annotations([s.annotation for s in samples], manifest)
    return manifest


# model-ready samples


@dataclass
class PreparedSample:
    """One sample shaped for the model: fixed-T features plus labels."""

    features: np.ndarray  # [T, d_v] float32
    feature_mask: np.ndarray  # [T] bool
    query: np.ndarray  # [N, d_w] float32
    labels: SpanLabels
    annotation: Annotation
    t_effective: int


def prepare_sample(raw_features: np.ndarray, ann: Annotation, T: int, d_w: int) -> PreparedSample:
    feats, mask = resample_features(raw_features, T)
    t_eff = int(mask.sum())
    labels = make_labels(ann, t_eff, t_total=T)
    return PreparedSample(feats, mask, embed_query(ann.query, d_w), labels, ann, t_eff)


def load_dataset(annotations_path, features_dir, T: int, d_w: int) -> list[PreparedSample]:
    """Load a manifest directory into model-ready samples."""
    feats_dir = Path(features_dir)
    out = []
    for ann in load_annotations(annotations_path):
        raw = read_features(feats_dir / f"{ann.video_id}.pft")
        out.append(prepare_sample(raw, ann, T, d_w))
    return out
