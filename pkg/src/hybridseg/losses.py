"""Training losses and supervision-aware routing.

Three terms drive training: a pixel-position-aware loss (weighted BCE plus
weighted IoU, weights emphasising pixels whose neighbourhood disagrees with
them, i.e. boundaries) on each decoder, and an uncertain-area perception loss
that pushes the background decoder to keep its recall of uncertain pixels
high.  All functions accept (H, W) maps or batches (B, H, W) and reduce over
the spatial dimensions only, so per-sample values stay available for routing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .network import ModelOutput

REFERENCE_KERNEL = 31       # pooling kernel at the published 352x352 resolution
REFERENCE_RESOLUTION = 352


def default_ppa_kernel(resolution: int) -> int:
    """Pooling kernel scaled with resolution: 31 at 352, 7 at 64."""
    k = math.ceil(REFERENCE_KERNEL * resolution / REFERENCE_RESOLUTION)
    return k if k % 2 == 1 else k + 1


def _flat4d(t: torch.Tensor) -> torch.Tensor:
    """View (..., H, W) as (N, 1, H, W) for pooling."""
    h, w = t.shape[-2:]
    return t.reshape(-1, 1, h, w)


def ppa_weights(gt: torch.Tensor, kernel: int) -> torch.Tensor:
    """w = 1 + 5*|meanpool_k(gt) - gt|, in [1, 6].

    The mean pool has stride 1 and zero padding, so weights rise at label
    boundaries (and at image borders of foreground regions) and stay 1 deep
    inside constant regions.
    """
    if kernel % 2 == 0:
        raise ValueError(f"pooling kernel must be odd, got {kernel}")
    pooled = F.avg_pool2d(_flat4d(gt), kernel, stride=1, padding=kernel // 2,
                          count_include_pad=True)
    return 1.0 + 5.0 * (pooled.reshape(gt.shape) - gt).abs()


def weighted_bce(logits: torch.Tensor, gt: torch.Tensor,
                 weights: torch.Tensor) -> torch.Tensor:
    """Weight-normalised binary cross entropy, reduced over the last two dims."""
    per_pixel = F.binary_cross_entropy_with_logits(logits, gt, reduction="none")
    return (weights * per_pixel).sum(dim=(-2, -1)) / weights.sum(dim=(-2, -1))


def weighted_iou(probs: torch.Tensor, gt: torch.Tensor, weights: torch.Tensor,
                 eps: float = 1.0) -> torch.Tensor:
    """1 - weighted soft IoU with a smoothing epsilon in both ratio terms."""
    inter = (weights * probs * gt).sum(dim=(-2, -1))
    union = (weights * (probs + gt - probs * gt)).sum(dim=(-2, -1))
    return 1.0 - (inter + eps) / (union + eps)


def ppa_loss(logits: torch.Tensor, gt: torch.Tensor, kernel: int,
             iou_eps: float = 1.0) -> torch.Tensor:
    """Pixel-position-aware loss: weighted BCE + weighted IoU."""
    w = ppa_weights(gt, kernel)
    return weighted_bce(logits, gt, w) + weighted_iou(torch.sigmoid(logits), gt, w,
                                                      eps=iou_eps)


def perception_loss(bg_probs: torch.Tensor, reversed_mask: torch.Tensor) -> torch.Tensor:
    """Soft 1 - TN/(TN+FP) over the uncertain area of the reversed weak label.

    Positive predictions mean background, so over pixels with reversed label 0
    the expected true negatives are sum(1-p) and false positives sum(p); the
    loss reduces to the mean background probability inside the uncertain area.
    Zero when the label marks no uncertain pixels.
    """
    uncertain = (reversed_mask == 0).to(bg_probs.dtype)
    counts = uncertain.sum(dim=(-2, -1))
    total = (bg_probs * uncertain).sum(dim=(-2, -1))
    return torch.where(counts > 0, total / counts.clamp(min=1.0),
                       torch.zeros_like(total))


def hard_perception_score(bg_probs: torch.Tensor, reversed_mask: torch.Tensor,
                          threshold: float = 0.5) -> torch.Tensor:
    """Count-based 1 - TN/(TN+FP) at a hard threshold (evaluation only)."""
    with torch.no_grad():
        pos = (bg_probs >= threshold).to(bg_probs.dtype)
        return perception_loss(pos, reversed_mask)


@dataclass
class BranchTargets:
    """Per-sample supervision for the two decoders; None disables a branch."""

    seg: Optional[torch.Tensor] = None   # pixel-wise mask for the segmentation decoder
    aux: Optional[torch.Tensor] = None   # reversed box mask for the background decoder


@dataclass
class LossReport:
    """Per-term values for one training step.  total = ppa_seg + ppa_aux + percept_aux."""

    ppa_seg: torch.Tensor
    ppa_aux: torch.Tensor
    percept_aux: torch.Tensor
    total: torch.Tensor
    counts: dict[str, int] = field(default_factory=dict)

    def log_line(self, step: int) -> str:
        vals = (self.ppa_seg, self.ppa_aux, self.percept_aux, self.total)
        vals = [float(v.detach()) if torch.is_tensor(v) else float(v) for v in vals]
        return f"{step}," + ",".join(f"{v:.10g}" for v in vals)


def total_loss(output: ModelOutput, targets: Sequence[BranchTargets], kernel: int,
               include_perception: bool = True, iou_eps: float = 1.0) -> LossReport:
    """Route a mixed batch through the loss terms.

    ppa_seg averages over samples with a pixel-wise target, ppa_aux and
    percept_aux over samples with a reversed box target; terms without
    eligible samples contribute zero with count zero.
    """
    if output.seg_logits.ndim != 3 or len(targets) != output.seg_logits.shape[0]:
        raise ValueError("targets must align with the output batch")
    seg_idx = [i for i, t in enumerate(targets) if t.seg is not None]
    aux_idx = [i for i, t in enumerate(targets) if t.aux is not None]
    if not seg_idx and not aux_idx:
        raise ValueError("batch carries no labels")
    zero = output.seg_logits.new_zeros(())

    ppa_seg = zero
    if seg_idx:
        logits = output.seg_logits[seg_idx]
        gts = torch.stack([targets[i].seg for i in seg_idx])
        ppa_seg = ppa_loss(logits, gts, kernel, iou_eps=iou_eps).mean()

    ppa_aux = zero
    percept_aux = zero
    if aux_idx:
        if output.bg_logits is None:
            raise ValueError("auxiliary targets given but the model has no background branch")
        bg_logits = output.bg_logits[aux_idx]
        revs = torch.stack([targets[i].aux for i in aux_idx])
        ppa_aux = ppa_loss(bg_logits, revs, kernel, iou_eps=iou_eps).mean()
        if include_perception:
            percept_aux = perception_loss(torch.sigmoid(bg_logits), revs).mean()

    counts = {
        "ppa_seg": len(seg_idx),
        "ppa_aux": len(aux_idx),
        "percept_aux": len(aux_idx) if (aux_idx and include_perception) else 0,
    }
    return LossReport(ppa_seg=ppa_seg, ppa_aux=ppa_aux, percept_aux=percept_aux,
                      total=ppa_seg + ppa_aux + percept_aux, counts=counts)
