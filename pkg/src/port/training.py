"""Training and evaluation harness.

AdamW with decoupled weight decay and a linear learning-rate decay drive
the two-branch objective; evaluation reports IoU@mu and mIoU over spans
converted back to seconds.  Checkpoints keep the best-mIoU and the last
epoch; a NaN loss aborts while the last good checkpoint stays on disk.
"""

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import (
    BadMagicError,
    BadVersionError,
    PreparedSample,
    TruncatedFileError,
    _atomic_write_bytes,
    index_to_time,
)
from .losses import (
    LossReport,
    LossWeights,
    alignment_loss,
    qgh_loss,
    recovery_loss,
    span_loss,
    total_loss,
)
from .model import ModelConfig, PortModel
from .span import CorruptionConfig, embed_labels, flip_labels, select_span

CHECKPOINT_MAGIC = b"PORTCKPT"
CHECKPOINT_VERSION = 1
DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)


class TrainingDivergedError(RuntimeError):
    """Raised when the loss stops being finite; the last epoch checkpoint
    written before the bad step remains on disk."""


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 100
    lr0: float = 2e-4
    weight_decay: float = 0.01
    T: int = 128
    d: int = 256
    alpha: float = 0.2
    lambda_qgh: float = 5.0
    lambda_rec: float = 1.0
    lambda_align: float = 1.0
    positional_encoding: str = "none"
    prt_enabled: bool = True
    dual_align_enabled: bool = True
    detach_align_teacher: bool = True
    dropout: float = 0.2
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "epochs", "T", "d"):
            if getattr(self, name) < 1:
                raise ValueError(f"train config: {name} must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("train config: lr0 must be positive")
        if self.weight_decay < 0:
            raise ValueError("train config: weight_decay must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("train config: alpha must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("train config: dropout must lie in [0, 1)")
        if self.grad_clip < 0:
            raise ValueError("train config: grad_clip must be >= 0 (0 disables)")

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_qgh, self.lambda_rec, self.lambda_align)


@dataclass
class MetricsReport:
    iou_at: dict
    miou: float
    n: int


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Parameters without a gradient are skipped entirely (no moment update,
    no decay), so a disabled branch leaves its weights untouched exactly
    as if it did not exist.
    """

    def __init__(
        self,
        params: dict,
        weight_decay: float = 0.01,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        grad_clip: float = 1.0,
    ):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip
        self.state = {
            name: {
                "m": np.zeros_like(p.data),
                "v": np.zeros_like(p.data),
                "t": 0,
            }
            for name, p in params.items()
        }

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _clip(self, live) -> None:
        if self.grad_clip <= 0:
            return
        total = 0.0
        for _, p in live:
            total += float((p.grad.astype(np.float64) ** 2).sum())
        norm = math.sqrt(total)
        if norm > self.grad_clip:
            scale = self.grad_clip / norm
            for _, p in live:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)

    def step(self, lr: float) -> None:
        live = [(n, p) for n, p in self.params.items() if p.grad is not None]
        for name, p in live:
            if not np.isfinite(p.grad).all():
                raise TrainingDivergedError(f"adamw: non-finite gradient in {name}")
        self._clip(live)
        for name, p in live:
            st = self.state[name]
            st["t"] += 1
            g = p.grad
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * g * g
            m_hat = st["m"] / (1.0 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1.0 - self.beta2 ** st["t"])
            decay = lr * self.weight_decay * p.data
            p.data = (p.data - decay - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.data.dtype
            )


def lr_schedule(step: int, total_steps: int, lr0: float) -> float:
    """Linear decay from lr0 to 0 over total_steps, floored at 0."""
    if total_steps <= 0:
        raise ValueError("lr_schedule: total_steps must be positive")
    return lr0 * max(0.0, 1.0 - step / total_steps)


def iou(a: tuple, b: tuple) -> float:
    """Intersection over union of two ordered [start, end] spans in seconds.

    Zero-length spans act as points: IoU 1 against a coincident point,
    otherwise their overlap is 0.
    """
    a_s, a_e = a
    b_s, b_e = b
    if a_e < a_s or b_e < b_s:
        raise ValueError("iou: spans must be ordered (start <= end)")
    inter = max(0.0, min(a_e, b_e) - max(a_s, b_s))
    union = (a_e - a_s) + (b_e - b_s) - inter
    if union == 0.0:
        return 1.0 if a_s == b_s else 0.0
    return inter / union


@dataclass
class Batch:
    video: Tensor
    video_mask: np.ndarray
    query: Tensor
    query_mask: np.ndarray
    labels: list
    y_highlight: np.ndarray
    samples: list


def collate(samples: Sequence[PreparedSample]) -> Batch:
    """Stacks prepared samples; queries are padded to the longest in the batch."""
    if not samples:
        raise ValueError("collate: empty batch")
    B = len(samples)
    d_w = samples[0].query.shape[1]
    n_max = max(s.query.shape[0] for s in samples)
    video = np.stack([s.features for s in samples]).astype(np.float32)
    vmask = np.stack([s.feature_mask for s in samples])
    query = np.zeros((B, n_max, d_w), dtype=np.float32)
    qmask = np.zeros((B, n_max), dtype=bool)
    for i, s in enumerate(samples):
        n = s.query.shape[0]
        query[i, :n] = s.query
        qmask[i, :n] = True
    y_high = np.stack([s.labels.y_highlight for s in samples]).astype(np.float32)
    return Batch(
        video=Tensor(video),
        video_mask=vmask,
        query=Tensor(query),
        query_mask=qmask,
        labels=[s.labels for s in samples],
        y_highlight=y_high,
        samples=list(samples),
    )


def forward_batch(
    model: PortModel,
    batch: Batch,
    cfg: TrainConfig,
    drop_rng: np.random.Generator,
    flip_rng: Optional[np.random.Generator] = None,
) -> LossReport:
    """One objective evaluation; the recovering branch runs only with PRT on."""
    corrupted_start = corrupted_end = None
    if cfg.prt_enabled:
        if flip_rng is None:
            raise ValueError("forward_batch: PRT needs a flip rng")
        y_start = np.stack([l.y_start for l in batch.labels]).astype(np.int64)
        y_end = np.stack([l.y_end for l in batch.labels]).astype(np.int64)
        ccfg = CorruptionConfig(alpha=cfg.alpha)
        cs_raw, _ = flip_labels(y_start, ccfg, batch.video_mask, rng=flip_rng)
        ce_raw, _ = flip_labels(y_end, ccfg, batch.video_mask, rng=flip_rng)
        corrupted_start = embed_labels(cs_raw, "start", model.span.labels)
        corrupted_end = embed_labels(ce_raw, "end", model.span.labels)
    out = model(
        batch.video,
        batch.query,
        batch.video_mask,
        batch.query_mask,
        drop_rng,
        corrupted_start,
        corrupted_end,
    )
    rec = align = None
    if cfg.prt_enabled:
        rec = recovery_loss(out.rec, batch.labels)
        if cfg.dual_align_enabled:
            align = alignment_loss(out.pred, out.rec, detach_teacher=cfg.detach_align_teacher)
    return total_loss(
        span_loss(out.pred, batch.labels),
        qgh_loss(out.highlight_logits, batch.y_highlight, batch.video_mask),
        cfg.loss_weights(),
        rec=rec,
        align=align,
    )


def split_dataset(samples: Sequence[PreparedSample], train_frac: float = 0.8) -> tuple:
    """Deterministic split by sample index: leading train share, trailing rest."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError("split_dataset: train_frac must lie in (0, 1)")
    n_train = int(len(samples) * train_frac)
    return list(samples[:n_train]), list(samples[n_train:])


def predict_spans(
    model: PortModel, samples: Sequence[PreparedSample], batch_size: int = 64
) -> list:
    """Top-1 span per sample in seconds, via the predicting branch only."""
    model.eval()
    rng = np.random.default_rng(0)
    spans = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        batch = collate(chunk)
        out = model(batch.video, batch.query, batch.video_mask, batch.query_mask, rng)
        i_s, i_e = select_span(out.pred)
        i_s, i_e = np.atleast_1d(i_s), np.atleast_1d(i_e)
        for k, s in enumerate(chunk):
            t_eff = s.t_effective
            dur = s.annotation.duration_s
            spans.append(
                (index_to_time(int(i_s[k]), t_eff, dur), index_to_time(int(i_e[k]), t_eff, dur))
            )
    return spans


def evaluate(
    model: PortModel,
    samples: Sequence[PreparedSample],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    batch_size: int = 64,
) -> MetricsReport:
    """IoU@mu (percentage with IoU >= mu) and mean IoU over all samples."""
    if not samples:
        raise ValueError("evaluate: empty dataset")
    spans = predict_spans(model, samples, batch_size)
    ious = [
        iou(span, (s.annotation.start_s, s.annotation.end_s))
        for span, s in zip(spans, samples)
    ]
    n = len(ious)
    iou_at = {
        mu: 100.0 * sum(1 for v in ious if v >= mu) / n for mu in thresholds
    }
    miou = 100.0 * math.fsum(ious) / n
    return MetricsReport(iou_at=iou_at, miou=miou, n=n)


def save_checkpoint(path, params: dict) -> None:
    """Writes the PORTCKPT container: magic, version, then length-prefixed
    (name, shape, little-endian f32 payload) records."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, p in params.items():
        data = np.ascontiguousarray(p.data if isinstance(p, Tensor) else p, dtype="<f4")
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    _atomic_write_bytes(Path(path), b"".join(parts))


def load_checkpoint(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"checkpoint: bad magic in {path}")
    off = 8
    if len(blob) < off + 8:
        raise TruncatedFileError(f"checkpoint: truncated header in {path}")
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise BadVersionError(f"checkpoint: version {version}, expected {CHECKPOINT_VERSION}")
    params = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            payload = blob[off : off + 4 * size]
            if len(payload) < 4 * size:
                raise struct.error
            off += 4 * size
        except struct.error:
            raise TruncatedFileError(f"checkpoint: truncated record in {path}") from None
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return params


def load_into_model(model: PortModel, state: dict) -> None:
    params = model.named_parameters()
    missing = set(params) - set(state)
    extra = set(state) - set(params)
    if missing or extra:
        raise ValueError(
            f"checkpoint: parameter names do not match (missing {sorted(missing)}, "
            f"unexpected {sorted(extra)})"
        )
    for name, p in params.items():
        if tuple(state[name].shape) != p.shape:
            raise ValueError(
                f"checkpoint: shape mismatch for {name}: {state[name].shape} vs {p.shape}"
            )
        p.data = state[name].astype(p.data.dtype)


@dataclass
class TrainResult:
    model: PortModel
    best_miou: float
    history: list
    log_path: Path
    best_path: Path
    last_path: Path


def build_model(cfg: TrainConfig, d_v: int, d_w: int, rng: np.random.Generator) -> PortModel:
    mc = ModelConfig(
        d_v=d_v,
        d_w=d_w,
        dim=cfg.d,
        dropout=cfg.dropout,
        positional=cfg.positional_encoding,
        max_len=max(cfg.T, 64),
    )
    return PortModel(mc, rng)


def train(
    cfg: TrainConfig,
    samples: Sequence[PreparedSample],
    out_dir,
    val_samples: Optional[Sequence[PreparedSample]] = None,
) -> TrainResult:
    """Full run: 80/20 index split unless a validation set is supplied,
    per-step loss lines and per-epoch metric lines in train_log.jsonl,
    best-mIoU and last checkpoints in the output directory."""
    if not samples:
        raise ValueError("train: empty dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if val_samples is None:
        train_samples, val_samples = split_dataset(samples)
    else:
        train_samples = list(samples)
        val_samples = list(val_samples)
    if not train_samples or not val_samples:
        raise ValueError("train: both splits must be non-empty")

    init_rng = np.random.default_rng([cfg.seed, 0])
    flip_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    order_rng = np.random.default_rng([cfg.seed, 3])

    d_v = train_samples[0].features.shape[1]
    d_w = train_samples[0].query.shape[1]
    model = build_model(cfg, d_v, d_w, init_rng)
    params = model.named_parameters()
    opt = AdamW(params, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)

    steps_per_epoch = math.ceil(len(train_samples) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    log_path = out / "train_log.jsonl"
    best_path = out / "best.ckpt"
    last_path = out / "last.ckpt"

    best_miou = -1.0
    history = []
    step = 0
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            model.train()
            order = order_rng.permutation(len(train_samples))
            for lo in range(0, len(order), cfg.batch_size):
                batch = collate([train_samples[i] for i in order[lo : lo + cfg.batch_size]])
                lr = lr_schedule(step, total_steps, cfg.lr0)
                opt.zero_grad()
                with Tape() as tape:
                    report = forward_batch(model, batch, cfg, drop_rng, flip_rng)
                    if not np.isfinite(report.total.item()):
                        raise TrainingDivergedError(
                            f"train: loss became non-finite at step {step}"
                        )
                    tape.backward(report.total)
                opt.step(lr)
                record = {"step": step, "lr": lr}
                record.update(report.as_dict())
                log.write(json.dumps(record) + "\n")
                step += 1
            metrics = evaluate(model, val_samples)
            epoch_record = {
                "epoch": epoch,
                "iou@0.3": metrics.iou_at[0.3],
                "iou@0.5": metrics.iou_at[0.5],
                "iou@0.7": metrics.iou_at[0.7],
                "miou": metrics.miou,
            }
            log.write(json.dumps(epoch_record) + "\n")
            log.flush()
            history.append(metrics)
            save_checkpoint(last_path, params)
            if metrics.miou > best_miou:
                best_miou = metrics.miou
                save_checkpoint(best_path, params)
    return TrainResult(
        model=model,
        best_miou=best_miou,
        history=history,
        log_path=log_path,
        best_path=best_path,
        last_path=last_path,
    )
