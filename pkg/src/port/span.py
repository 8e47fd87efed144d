"""Two-branch span predictor with shared weights.

The Predicting branch estimates start/end boundary distributions from the
highlighted video features.  The Recovering branch runs the identical
computation on the same features, but each GRU step additionally sees an
embedding of a corrupted ground-truth boundary label, and is trained to
reconstruct the true boundaries from that degraded signal.

Both branches call the same GRUs and heads, so the input widths must match:
the Predicting branch concatenates a learned null embedding where the
Recovering branch concatenates label embeddings.  Labels never reach the
Predicting branch; its output depends only on features and parameters.

GRUs are unidirectional on purpose: a backward pass over the label sequence
would let position t see the uncorrupted future compensating for flips, and
the same wiring serves the label-free Predicting branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import GRU, Module, PredHead


@dataclass
class CorruptionConfig:
    """Label corruption settings for the Recovering branch."""

    alpha: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"flip rate alpha must be in [0, 1], got {self.alpha}")


@dataclass
class BranchOutput:
    """Boundary distributions from one branch.

    Each row of start_dist/end_dist sums to 1 over unmasked positions and is
    exactly zero at masked positions.
    """

    start_dist: Tensor
    end_dist: Tensor
    mask: np.ndarray


def flip_labels(
    labels: np.ndarray,
    cfg: CorruptionConfig,
    valid_mask: np.ndarray,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, int]:
    """Invert each valid position's binary label with probability alpha.

    Masked positions pass through untouched.  Returns the corrupted copy and
    the number of positions flipped.  The flip count over L valid positions
    is Binomial(L, alpha); callers wanting a fresh draw per training step
    pass their own generator.
    """
    labels = np.asarray(labels)
    valid = np.asarray(valid_mask, dtype=bool)
    if labels.shape != valid.shape:
        raise ValueError(f"flip_labels: labels {labels.shape} vs mask {valid.shape}")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    flips = (rng.random(labels.shape) < cfg.alpha) & valid
    corrupted = np.where(flips, 1 - labels, labels)
    return corrupted, int(flips.sum())


class LabelEmbeddingTable(Module):
    """Five learned d-vectors: start/non-start, end/non-end, and null.

    The null vector is the Predicting branch's stand-in partner; only the
    label vectors encode boundary information.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        def row():
            return Tensor(rng.normal(0.0, 0.02, size=dim).astype(np.float32), requires_grad=True)

        self.start_emb = row()
        self.nonstart_emb = row()
        self.end_emb = row()
        self.nonend_emb = row()
        self.null_emb = row()


def embed_labels(corrupted: np.ndarray, kind: str, table: LabelEmbeddingTable) -> Tensor:
    """Map a binary sequence to label-embedding rows.

    ``kind`` selects the start or end vocabulary; bit 1 maps to the boundary
    vector, bit 0 to its complement.  Accepts [T] or [B, T] input and
    returns [T, d] or [B, T, d].
    """
    bits = np.asarray(corrupted, dtype=np.int64)
    if kind == "start":
        vocab = ad.stack([table.nonstart_emb, table.start_emb], axis=0)
    elif kind == "end":
        vocab = ad.stack([table.nonend_emb, table.end_emb], axis=0)
    else:
        raise ValueError(f"embed_labels: kind must be 'start' or 'end', got {kind!r}")
    return ad.embedding(vocab, bits)


class SpanPredictor(Module):
    """Start/end boundary scorer shared by both branches.

    The start GRU consumes [features ; partner] per step; its states feed the
    start head and, concatenated with the end partner, a second GRU for the
    end head ("conditioned on the predicted start").  ``partner`` is the
    broadcast null embedding when predicting and the corrupted label
    embeddings when recovering; everything else is identical by parameter
    identity, not by copy.
    """

    def __init__(self, dim: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        self.dim = dim
        self.dropout = dropout
        self.labels = LabelEmbeddingTable(dim, rng)
        self.start_gru = GRU(2 * dim, dim, rng)
        self.end_gru = GRU(2 * dim, dim, rng)
        self.start_head = PredHead(dim, dim, rng)
        self.end_head = PredHead(dim, dim, rng)

    def _run(
        self,
        features: Tensor,
        mask: np.ndarray,
        start_partner: Tensor,
        end_partner: Tensor,
        drop_rng: np.random.Generator,
    ) -> BranchOutput:
        x = ad.dropout(features, self.dropout, drop_rng, self.training)
        s_states = self.start_gru(ad.concat([x, start_partner], axis=-1))
        start_logits = self.start_head(s_states)
        e_states = self.end_gru(ad.concat([s_states, end_partner], axis=-1))
        end_logits = self.end_head(e_states)
        m = np.asarray(mask, dtype=bool)
        return BranchOutput(
            start_dist=ad.masked_softmax(start_logits, m),
            end_dist=ad.masked_softmax(end_logits, m),
            mask=m,
        )

    def _null_partner(self, B: int, T: int) -> Tensor:
        return self.labels.null_emb.reshape(1, 1, self.dim).broadcast_to((B, T, self.dim))

    def predict_boundaries(
        self, features: Tensor, mask: np.ndarray, drop_rng: np.random.Generator
    ) -> BranchOutput:
        """Boundary distributions from features alone (no label input)."""
        B, T, _ = features.shape
        null = self._null_partner(B, T)
        return self._run(features, mask, null, null, drop_rng)

    def recover_boundaries(
        self,
        features: Tensor,
        mask: np.ndarray,
        corrupted_start_emb: Tensor,
        corrupted_end_emb: Tensor,
        drop_rng: np.random.Generator,
    ) -> BranchOutput:
        """Boundary distributions reconstructed from corrupted label embeddings."""
        return self._run(features, mask, corrupted_start_emb, corrupted_end_emb, drop_rng)


def select_span(out: BranchOutput) -> tuple:
    """Maximum-joint-probability span subject to start <= end.

    Scans all unmasked (i, j) pairs with i <= j for the largest
    start_dist[i] * end_dist[j]; ties resolve to the smallest i, then the
    smallest j.  Accepts single [T] or batched [B, T] outputs, returning
    ints or int arrays accordingly.
    """
    s = out.start_dist.numpy() if isinstance(out.start_dist, Tensor) else np.asarray(out.start_dist)
    e = out.end_dist.numpy() if isinstance(out.end_dist, Tensor) else np.asarray(out.end_dist)
    mask = np.broadcast_to(np.asarray(out.mask, dtype=bool), s.shape)
    single = s.ndim == 1
    if single:
        s, e, mask = s[None], e[None], mask[None]
    B, T = s.shape
    starts = np.empty(B, dtype=np.int64)
    ends = np.empty(B, dtype=np.int64)
    upper = np.triu(np.ones((T, T), dtype=bool))
    for b in range(B):
        if not mask[b].any():
            raise ValueError("select_span: no unmasked positions")
        joint = np.outer(s[b], e[b])
        allowed = upper & mask[b][:, None] & mask[b][None, :]
        joint = np.where(allowed, joint, -1.0)
        # row-major argmax realizes the smallest-i-then-smallest-j tie-break
        flat = int(np.argmax(joint))
        starts[b], ends[b] = divmod(flat, T)
    if single:
        return int(starts[0]), int(ends[0])
    return starts, ends
