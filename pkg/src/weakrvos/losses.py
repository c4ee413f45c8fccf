"""Supervised loss surface: dice, focal, their weighted mask loss, the
box-projection MIL loss, the per-frame piecewise segmentation loss, and the
cross-frame loss that lets one frame's annotation supervise every other
frame's dynamic filter.

All losses operate at prediction resolution (stride 4). Full-resolution mask
targets are downsampled by nearest neighbor and boxes are rescaled with
outward rounding so boundary pixels are never falsely penalized.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from .data import Box
from .errors import DataError


@dataclass
class LossWeights:
    dice: float = 5.0
    focal: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    mil: float = 1.0
    smooth_eps: float = 1e-6

    def __post_init__(self):
        for name in ("dice", "focal", "focal_alpha", "focal_gamma", "mil", "smooth_eps"):
            if getattr(self, name) < 0:
                raise DataError(f"loss weight {name} must be >= 0")

    def to_dict(self) -> dict:
        return {"dice": self.dice, "focal": self.focal,
                "focal_alpha": self.focal_alpha, "focal_gamma": self.focal_gamma,
                "mil": self.mil, "smooth_eps": self.smooth_eps}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


class TargetKind(enum.Enum):
    MASK = "mask"
    BOX = "box"
    NONE = "none"


@dataclass
class SupervisionTarget:
    """What one frame contributes: a dense mask, a box, or nothing."""

    kind: TargetKind
    mask: Optional[np.ndarray] = None   # full-resolution binary grid
    box: Optional[Box] = None           # pixel units, half-open

    def __post_init__(self):
        if self.kind is TargetKind.MASK and self.mask is None:
            raise DataError("MASK target requires a mask")
        if self.kind is TargetKind.BOX and self.box is None:
            raise DataError("BOX target requires a box")


class LgcfsMode(enum.Enum):
    OFF = "off"
    FIRST_FRAME = "first_frame"
    FULL_AVG = "full_avg"
    FULL_NOAVG = "full_noavg"

    @classmethod
    def parse(cls, name: str) -> "LgcfsMode":
        try:
            return cls(name.lower())
        except ValueError:
            raise DataError(f"unknown lgcfs mode '{name}'; expected one of "
                            f"{[m.value for m in cls]}") from None


# ---------------------------------------------------------------------------
# target geometry helpers

def downsample_mask(mask: Union[np.ndarray, torch.Tensor], stride: int) -> torch.Tensor:
    """Nearest-neighbor downsample (top-left anchor) to the prediction grid."""
    if isinstance(mask, np.ndarray):
        mask = torch.from_numpy(np.ascontiguousarray(mask))
    return mask[::stride, ::stride]


def rescale_box(box: Box, stride: int, grid_h: int, grid_w: int) -> Box:
    """Pixel box -> stride grid box with outward rounding, clamped to the grid."""
    x0, y0, x1, y1 = box
    gx0 = max(0, x0 // stride)
    gy0 = max(0, y0 // stride)
    gx1 = min(grid_w, -(-x1 // stride))
    gy1 = min(grid_h, -(-y1 // stride))
    if gx1 <= gx0 or gy1 <= gy0:
        raise ValueError(f"box {box} collapses to zero area on the {grid_h}x{grid_w} grid")
    return (int(gx0), int(gy0), int(gx1), int(gy1))


def _as_float(target, ref: torch.Tensor) -> torch.Tensor:
    if isinstance(target, np.ndarray):
        target = torch.from_numpy(np.ascontiguousarray(target))
    return target.to(dtype=ref.dtype, device=ref.device)


# ---------------------------------------------------------------------------
# core losses

def dice_loss(pred_probs: torch.Tensor, target, eps: float = 1e-6) -> torch.Tensor:
    """1 - (2*sum(p*y)+eps) / (sum(p)+sum(y)+eps)."""
    target = _as_float(target, pred_probs)
    if pred_probs.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred_probs.shape)} "
                         f"vs target {tuple(target.shape)}")
    inter = (pred_probs * target).sum()
    denom = pred_probs.sum() + target.sum()
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def focal_loss(pred_logits: torch.Tensor, target, alpha: float = 0.25,
               gamma: float = 2.0) -> torch.Tensor:
    """Mean focal loss, stabilized in logit space."""
    target = _as_float(target, pred_logits)
    if pred_logits.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred_logits.shape)} "
                         f"vs target {tuple(target.shape)}")
    p = torch.sigmoid(pred_logits)
    log_p = F.logsigmoid(pred_logits)
    log_np = F.logsigmoid(-pred_logits)
    pos = alpha * (1.0 - p) ** gamma * (-log_p)
    neg = (1.0 - alpha) * p ** gamma * (-log_np)
    return (target * pos + (1.0 - target) * neg).mean()


def mask_loss(pred_logits: torch.Tensor, mask_gt,
              weights: Optional[LossWeights] = None) -> torch.Tensor:
    w = weights if weights is not None else LossWeights()
    return (w.dice * dice_loss(torch.sigmoid(pred_logits), mask_gt, eps=w.smooth_eps)
            + w.focal * focal_loss(pred_logits, mask_gt,
                                   alpha=w.focal_alpha, gamma=w.focal_gamma))


def mil_box_loss(pred_logits: torch.Tensor, box: Box,
                 weights: Optional[LossWeights] = None) -> torch.Tensor:
    """Box supervision via axis max-projections.

    Every row/column line crossing the box is a positive bag (its max activation
    must reach 1); lines outside are negative bags (their max must reach 0).
    Projecting the sigmoid scores with a per-line max and taking dice against the
    box's own projections realizes exactly that.
    """
    w = weights if weights is not None else LossWeights()
    h, grid_w = pred_logits.shape
    x0, y0, x1, y1 = box
    if not (0 <= x0 < x1 <= grid_w and 0 <= y0 < y1 <= h):
        raise ValueError(f"degenerate or out-of-bounds box {box} for grid {h}x{grid_w}")
    p = torch.sigmoid(pred_logits)
    proj_x = p.amax(dim=0)
    proj_y = p.amax(dim=1)
    tgt_x = torch.zeros(grid_w, dtype=p.dtype, device=p.device)
    tgt_x[x0:x1] = 1.0
    tgt_y = torch.zeros(h, dtype=p.dtype, device=p.device)
    tgt_y[y0:y1] = 1.0
    return (dice_loss(proj_x, tgt_x, eps=w.smooth_eps)
            + dice_loss(proj_y, tgt_y, eps=w.smooth_eps))


def seg_loss(pred_logits: torch.Tensor, target: SupervisionTarget,
             weights: Optional[LossWeights] = None, stride: int = 4) -> torch.Tensor:
    """Piecewise per-frame loss: mask loss, weighted MIL box loss, or zero."""
    w = weights if weights is not None else LossWeights()
    if target.kind is TargetKind.NONE:
        return pred_logits.new_zeros(())
    if target.kind is TargetKind.MASK:
        return mask_loss(pred_logits, downsample_mask(target.mask, stride), w)
    h, grid_w = pred_logits.shape
    box = rescale_box(target.box, stride, h, grid_w)
    return w.mil * mil_box_loss(pred_logits, box, w)


def lgcfs_loss(cross_logits: Mapping[int, torch.Tensor], target: SupervisionTarget,
               weights: Optional[LossWeights] = None,
               mode: LgcfsMode = LgcfsMode.FULL_NOAVG, stride: int = 4,
               n_box_frames: Optional[int] = None) -> torch.Tensor:
    """Cross-frame loss into frame t.

    cross_logits maps source frame tau (whose filter produced the prediction)
    to logits on frame t's features, tau != t. The weighting matches the
    per-frame segmentation loss. FIRST_FRAME applies cross losses only into
    mask-annotated frames; FULL_AVG additionally divides box terms by the
    number of box-supervised frames in the clip (n_box_frames).
    """
    w = weights if weights is not None else LossWeights()
    if mode is LgcfsMode.OFF or not cross_logits or target.kind is TargetKind.NONE:
        ref = next(iter(cross_logits.values())) if cross_logits else None
        return ref.new_zeros(()) if ref is not None else torch.zeros(())

    preds = list(cross_logits.values())
    if target.kind is TargetKind.MASK:
        mask_ds = downsample_mask(target.mask, stride)
        total = preds[0].new_zeros(())
        for logits in preds:
            total = total + mask_loss(logits, mask_ds, w)
        return total

    # BOX target
    if mode is LgcfsMode.FIRST_FRAME:
        return preds[0].new_zeros(())
    h, grid_w = preds[0].shape
    box = rescale_box(target.box, stride, h, grid_w)
    total = preds[0].new_zeros(())
    for logits in preds:
        total = total + w.mil * mil_box_loss(logits, box, w)
    if mode is LgcfsMode.FULL_AVG:
        if n_box_frames is None or n_box_frames < 1:
            raise ValueError("FULL_AVG needs n_box_frames >= 1")
        total = total / n_box_frames
    return total
