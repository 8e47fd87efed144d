"""Full grounding model.

Wires the pipeline: per-modality projection, shared encoder stack,
context-query fusion, query-guided highlighting, and the two span
branches.  The recovering branch reuses the highlighted features of the
predicting branch; only the partner inputs to the boundary heads differ.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .encoder import CQAttention, Encoder, HighlightedFeatures, Projection, QueryHighlight
from .layers import Module
from .span import BranchOutput, SpanPredictor


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``heads`` defaults to 4 for widths up to 64 and 8 above, so small
    desk-scale runs keep a sane head size.
    """

    d_v: int
    d_w: int
    dim: int = 256
    heads: Optional[int] = None
    n_blocks: int = 1
    ff_mult: int = 4
    dropout: float = 0.2
    positional: str = "none"
    max_len: int = 512
    cross_gating: bool = True

    def __post_init__(self):
        if self.d_v < 1 or self.d_w < 1 or self.dim < 1:
            raise ValueError("model config: feature widths must be positive")
        if self.n_blocks < 1:
            raise ValueError("model config: need at least one encoder block")
        if self.heads is None:
            self.heads = 4 if self.dim <= 64 else 8


@dataclass
class ModelOutput:
    """One forward pass: predicting branch, optional recovering branch,
    highlight logits for the foreground loss, and the highlighted features."""

    pred: BranchOutput
    highlight_logits: Tensor
    highlighted: HighlightedFeatures
    rec: Optional[BranchOutput] = None


class PortModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.video_proj = Projection(cfg.d_v, cfg.dim, cfg.dropout, rng)
        self.query_proj = Projection(cfg.d_w, cfg.dim, cfg.dropout, rng)
        self.encoder = Encoder(
            cfg.dim,
            cfg.heads,
            cfg.n_blocks,
            cfg.ff_mult,
            cfg.dropout,
            cfg.positional,
            cfg.max_len,
            rng,
            cross_gating=cfg.cross_gating,
        )
        self.cqa = CQAttention(cfg.dim, rng)
        self.qgh = QueryHighlight(cfg.dim, rng)
        self.span = SpanPredictor(cfg.dim, cfg.dropout, rng)

    def highlight(
        self,
        video: Tensor,
        query: Tensor,
        video_mask: np.ndarray,
        query_mask: np.ndarray,
        drop_rng: np.random.Generator,
    ) -> tuple[HighlightedFeatures, Tensor]:
        """Runs the trunk up to the highlighted features."""
        v = self.video_proj(video, video_mask, drop_rng)
        q = self.query_proj(query, query_mask, drop_rng)
        v_enc, q_enc = self.encoder(v, q, video_mask, query_mask, drop_rng)
        fused = self.cqa(v_enc, q_enc, video_mask, query_mask)
        return self.qgh(fused, q_enc, video_mask, query_mask)

    def forward(
        self,
        video: Tensor,
        query: Tensor,
        video_mask: np.ndarray,
        query_mask: np.ndarray,
        drop_rng: np.random.Generator,
        corrupted_start: Optional[Tensor] = None,
        corrupted_end: Optional[Tensor] = None,
    ) -> ModelOutput:
        """Predicting branch always; recovering branch when corrupted label
        embeddings are supplied (both or neither)."""
        if (corrupted_start is None) != (corrupted_end is None):
            raise ValueError("model: corrupted start and end labels must come together")
        hf, logits = self.highlight(video, query, video_mask, query_mask, drop_rng)
        pred = self.span.predict_boundaries(hf.features, video_mask, drop_rng)
        rec = None
        if corrupted_start is not None:
            rec = self.span.recover_boundaries(
                hf.features, video_mask, corrupted_start, corrupted_end, drop_rng
            )
        return ModelOutput(pred=pred, highlight_logits=logits, highlighted=hf, rec=rec)
