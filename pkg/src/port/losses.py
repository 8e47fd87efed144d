"""Training objective: span + highlight + recovery + alignment terms.

total = span + lambda_qgh * qgh + lambda_rec * rec + lambda_align * align

The span and recovery terms are the same function applied to different
branches.  The alignment term pulls the Predicting branch's distributions
toward the Recovering branch's; by default the recovered distributions are
detached, so knowledge flows one way (teacher -> student) and the gradient
from this term never reaches the recovering pathway.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SpanLabels
from .span import BranchOutput


@dataclass
class LossWeights:
    lambda_qgh: float = 5.0
    lambda_rec: float = 1.0
    lambda_align: float = 1.0

    def __post_init__(self):
        for name in ("lambda_qgh", "lambda_rec", "lambda_align"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class LossReport:
    """Per-step loss breakdown.

    ``total`` is the live scalar Tensor to backprop through; the component
    fields are plain floats for logging.  ``rec``/``align`` are None when
    the recovering branch is disabled, and their log keys are then omitted.
    """

    span: float
    qgh: float
    rec: float | None
    align: float | None
    total: Tensor

    def as_dict(self) -> dict:
        out = {"span": self.span, "qgh": self.qgh}
        if self.rec is not None:
            out["rec"] = self.rec
        if self.align is not None:
            out["align"] = self.align
        out["total"] = self.total.item()
        return out


def _norm_labels(labels) -> list[SpanLabels]:
    if isinstance(labels, SpanLabels):
        return [labels]
    return list(labels)


def span_loss(pred: BranchOutput, labels: SpanLabels | Sequence[SpanLabels]) -> Tensor:
    """Cross-entropy of the start and end distributions at the true indices.

    Composed from the same one-distribution cross-entropy the tests oracle
    against; batches average per-sample (start + end) losses.
    """
    labs = _norm_labels(labels)
    sd, ed = pred.start_dist, pred.end_dist
    if sd.ndim == 1:
        sd = sd.reshape(1, sd.shape[0])
        ed = ed.reshape(1, ed.shape[0])
    mask = np.atleast_2d(pred.mask)
    if len(labs) != sd.shape[0]:
        raise ValueError(f"span_loss: {len(labs)} labels for batch of {sd.shape[0]}")
    per = []
    for b, lab in enumerate(labs):
        if not (mask[b, lab.i_s] and mask[b, lab.i_e]):
            raise ValueError(
                f"span_loss: boundary ({lab.i_s}, {lab.i_e}) hits a masked position"
            )
        ce_s = ad.cross_entropy(sd.select(0, b), lab.i_s)
        ce_e = ad.cross_entropy(ed.select(0, b), lab.i_e)
        per.append(ce_s + ce_e)
    if len(per) == 1:
        return per[0]
    return ad.stack(per).mean()


def qgh_loss(highlight_logits: Tensor, foreground: np.ndarray, valid_mask: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of the highlight scores over valid positions.

    Takes pre-sigmoid logits; the sigmoid is fused into the loss for
    stability.  The target is 1 exactly on the in-moment positions.
    """
    return ad.bce_with_logits(highlight_logits, foreground, valid_mask)


def recovery_loss(rec: BranchOutput, labels: SpanLabels | Sequence[SpanLabels]) -> Tensor:
    """Reconstruction objective of the Recovering branch; same form as span_loss."""
    return span_loss(rec, labels)


def alignment_loss(pred: BranchOutput, rec: BranchOutput, detach_teacher: bool = True) -> Tensor:
    """KL(P_s || P_s_rec) + KL(P_e || P_e_rec), averaged over the batch.

    The predicting distribution is always the first KL argument.  With
    ``detach_teacher`` the recovered distributions are constants, so this
    term only moves the Predicting branch.
    """
    if pred.mask.shape != rec.mask.shape or not np.array_equal(pred.mask, rec.mask):
        raise ValueError("alignment_loss: branch outputs cover different valid supports")
    rs = rec.start_dist.detach() if detach_teacher else rec.start_dist
    re_ = rec.end_dist.detach() if detach_teacher else rec.end_dist
    kl = ad.kl_divergence(pred.start_dist, rs) + ad.kl_divergence(pred.end_dist, re_)
    return kl.mean() if kl.ndim > 0 else kl


def total_loss(
    span: Tensor,
    qgh: Tensor,
    weights: LossWeights,
    rec: Tensor | None = None,
    align: Tensor | None = None,
) -> LossReport:
    """Weighted sum of the enabled terms, reported per component.

    With the recovering branch disabled (rec and align None) the objective
    reduces exactly to span + lambda_qgh * qgh.
    """
    for name, term in (("span", span), ("qgh", qgh), ("rec", rec), ("align", align)):
        if term is not None and not np.isfinite(term.item()):
            raise ValueError(f"total_loss: {name} term is not finite")
    total = span + weights.lambda_qgh * qgh
    if rec is not None:
        total = total + weights.lambda_rec * rec
    if align is not None:
        total = total + weights.lambda_align * align
    return LossReport(
        span=span.item(),
        qgh=qgh.item(),
        rec=None if rec is None else rec.item(),
        align=None if align is None else align.item(),
        total=total,
    )
