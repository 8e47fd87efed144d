"""Sequence encoding stack shared by the video and query streams.

The encoder applies self-attention and, when cross-gating is enabled,
a parallel cross-attention path over the other modality; a learned sigmoid
gate mixes the two paths per position.  With cross-gating off the block
degrades to a plain pre-norm transformer layer, which is the comparison
point for the gated variant.

Positional information is injectable as ``none`` (default), ``learned``
(trained embedding table) or ``sinusoidal``; the default reflects that the
boundary heads are recurrent and already order-aware.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LayerNorm, Linear, Module, MultiHeadAttention, fan_uniform

POSITIONAL_MODES = ("none", "learned", "sinusoidal")


def sinusoidal_table(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table [length, dim]."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (i // 2) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float32)


class Projection(Module):
    """Maps raw features [B, T, d_in] into the model width.

    Linear map, layer normalization, dropout, then masked rows are zeroed so
    padding carries no signal into attention values.  ``use_norm=False``
    drops the LayerNorm so tests can see the raw affine map alone.
    """

    def __init__(
        self,
        d_in: int,
        dim: int,
        dropout: float,
        rng: np.random.Generator,
        use_norm: bool = True,
    ):
        super().__init__()
        self.d_in = d_in
        self.dropout = dropout
        self.fc = Linear(d_in, dim, rng)
        self.norm = LayerNorm(dim) if use_norm else None

    def forward(self, x: Tensor, mask: np.ndarray, drop_rng: np.random.Generator) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"projection: input width {x.shape[-1]}, configured {self.d_in}")
        h = self.fc(x)
        if self.norm is not None:
            h = self.norm(h)
        h = ad.dropout(h, self.dropout, drop_rng, self.training)
        keep = np.asarray(mask, dtype=np.float32)[:, :, None]
        return h * keep


class PositionalEncoding(Module):
    """Adds position information to [B, T, dim] according to ``mode``."""

    def __init__(self, mode: str, max_len: int, dim: int, rng: np.random.Generator):
        super().__init__()
        if mode not in POSITIONAL_MODES:
            raise ValueError(f"positional mode {mode!r} not one of {POSITIONAL_MODES}")
        self.mode = mode
        self.max_len = max_len
        if mode == "learned":
            self.table = Tensor(
                rng.normal(0.0, 0.02, size=(max_len, dim)).astype(np.float32),
                requires_grad=True,
            )
        elif mode == "sinusoidal":
            self.fixed = sinusoidal_table(max_len, dim)

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == "none":
            return x
        T = x.shape[1]
        if T > self.max_len:
            raise ValueError(f"sequence length {T} exceeds positional table {self.max_len}")
        if self.mode == "learned":
            return x + ad.embedding(self.table, np.arange(T))
        return x + Tensor(self.fixed[:T])


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-norm block: gated parallel self/cross attention, then a feed-forward.

    One instance serves both modalities; weight sharing between the video and
    query streams comes from calling the same block on each.  When ``cross``
    is None (or the block was built with ``cross_gating=False``) only the
    self-attention path runs.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        ff_mult: int,
        dropout: float,
        rng: np.random.Generator,
        cross_gating: bool = True,
    ):
        super().__init__()
        self.cross_gating = cross_gating
        self.dropout = dropout
        self.ln_attn = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        if cross_gating:
            self.cross_attn = MultiHeadAttention(dim, heads, rng)
            self.gate = Linear(2 * dim, dim, rng)
        self.ln_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, ff_mult * dim, rng)

    def forward(
        self,
        x: Tensor,
        mask: np.ndarray,
        drop_rng: np.random.Generator,
        cross: Tensor | None = None,
        cross_mask: np.ndarray | None = None,
    ) -> Tensor:
        h = self.ln_attn(x)
        a_self = self.self_attn(h, h, h, mask)
        if self.cross_gating and cross is not None:
            a_cross = self.cross_attn(h, cross, cross, cross_mask)
            g = ad.sigmoid(self.gate(ad.concat([a_self, a_cross], axis=-1)))
            attn_out = g * a_self + (1.0 - g) * a_cross
        else:
            attn_out = a_self
        x = x + ad.dropout(attn_out, self.dropout, drop_rng, self.training)
        ffn_out = self.ffn(self.ln_ffn(x))
        return x + ad.dropout(ffn_out, self.dropout, drop_rng, self.training)


class Encoder(Module):
    """Positional encoding plus a stack of shared blocks serving both streams.

    The same block parameters encode the video and the query; the optional
    cross path lets each modality attend to the other.  Outputs at masked
    positions are zeroed.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        n_blocks: int,
        ff_mult: int,
        dropout: float,
        positional: str,
        max_len: int,
        rng: np.random.Generator,
        cross_gating: bool = True,
    ):
        super().__init__()
        self.pos = PositionalEncoding(positional, max_len, dim, rng)
        self.blocks = [
            EncoderBlock(dim, heads, ff_mult, dropout, rng, cross_gating)
            for _ in range(n_blocks)
        ]

    def forward(
        self,
        video: Tensor,
        query: Tensor,
        video_mask: np.ndarray,
        query_mask: np.ndarray,
        drop_rng: np.random.Generator,
    ) -> tuple[Tensor, Tensor]:
        v = self.pos(video)
        q = self.pos(query)
        for block in self.blocks:
            v_next = block(v, video_mask, drop_rng, q, query_mask)
            q_next = block(q, query_mask, drop_rng, v, video_mask)
            v, q = v_next, q_next
        vm = np.asarray(video_mask, dtype=np.float32)[:, :, None]
        qm = np.asarray(query_mask, dtype=np.float32)[:, :, None]
        return v * vm, q * qm


class CQAttention(Module):
    """Context-query attention fusing video and query streams.

    The similarity between video position i and query token j is trilinear:
    ``s_ij = w_v . v_i + w_q . q_j + w_m . (v_i * q_j)``.  No scalar bias:
    both consumers of the similarity matrix are softmaxes, which cancel a
    uniform shift.  Row softmax (over query tokens) builds context-to-query
    summaries A; the composed row-then-column attention builds
    query-to-context summaries B.  Output is a linear map of
    [V, A, V*A, V*B] back to the model width.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.w_v = fan_uniform(rng, dim, (dim, 1))
        self.w_q = fan_uniform(rng, dim, (dim, 1))
        self.w_m = fan_uniform(rng, dim, (1, 1, dim))
        self.out = Linear(4 * dim, dim, rng)

    def similarity(self, video: Tensor, query: Tensor) -> Tensor:
        B, T, dim = video.shape
        L = query.shape[1]
        sv = ad.matmul(video, self.w_v).reshape(B, T, 1)
        sq = ad.matmul(query, self.w_q).reshape(B, 1, L)
        sm = ad.matmul(video * self.w_m, query.transpose((0, 2, 1)))
        return sv + sq + sm

    def forward(
        self,
        video: Tensor,
        query: Tensor,
        video_mask: np.ndarray,
        query_mask: np.ndarray,
    ) -> Tensor:
        s = self.similarity(video, query)
        row = ad.masked_softmax(s, np.asarray(query_mask, bool)[:, None, :], axis=-1)
        col = ad.masked_softmax(s, np.asarray(video_mask, bool)[:, :, None], axis=1)
        a = ad.matmul(row, query)
        b = ad.matmul(ad.matmul(row, col.transpose((0, 2, 1))), video)
        fused = ad.concat([video, a, video * a, video * b], axis=-1)
        return self.out(fused)


@dataclass
class HighlightedFeatures:
    """Query-highlighted video features plus the per-position scores.

    ``highlight_scores`` lie in [0, 1] and are exactly 0 at masked
    positions; they are reporting output, detached from the graph.
    """

    features: Tensor
    highlight_scores: np.ndarray


class QueryHighlight(Module):
    """Scores each video position as query-relevant foreground.

    The query stream is pooled by a mask-aware mean into one vector pasted
    beside every fused row; a linear head plus sigmoid yields the foreground
    confidence h_t.  The output features are h_t * [fused_t ; pooled],
    mapped back to the model width, so background positions are damped
    before the boundary heads.  Supervision targets exactly the in-moment
    positions, with no widening of the region.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.score = Linear(2 * dim, 1, rng)
        self.out = Linear(2 * dim, dim, rng)

    @staticmethod
    def pooled_query(query: Tensor, query_mask: np.ndarray) -> Tensor:
        B, L, dim = query.shape
        m = np.asarray(query_mask, dtype=np.float32)
        counts = m.sum(axis=1, keepdims=True)
        if (counts == 0).any():
            raise ValueError("query pooling: a sample has no valid tokens")
        masked = query * m[:, :, None]
        return masked.sum(axis=1) * Tensor(1.0 / counts)

    def forward(
        self,
        fused: Tensor,
        query: Tensor,
        video_mask: np.ndarray,
        query_mask: np.ndarray,
    ) -> tuple[HighlightedFeatures, Tensor]:
        """Returns (HighlightedFeatures, pre-sigmoid logits [B, T])."""
        B, T, dim = fused.shape
        pooled = self.pooled_query(query, query_mask)
        pooled_b = pooled.reshape(B, 1, dim).broadcast_to((B, T, dim))
        cat = ad.concat([fused, pooled_b], axis=-1)
        logits = self.score(cat).reshape(B, T)
        h = ad.sigmoid(logits)
        features = self.out(cat * h.reshape(B, T, 1))
        scores = h.numpy() * np.asarray(video_mask, dtype=h.numpy().dtype)
        return HighlightedFeatures(features, scores), logits
