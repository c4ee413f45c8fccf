"""Bi-level pixel contrast: partition pixel embeddings into foreground and
background (from ground-truth masks, or from thresholded predictions inside
boxes), then contrast them against the sentence embedding (language-vision)
and against clip-global mean anchors (consistency).

Partitions carry raw embedding vectors so the losses backpropagate into the
embedding head; the prediction scores used for pseudo partitioning are only
ever used for index selection and should be detached by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .data import Box
from .errors import DataError

CLAMP_LOGIT = 30.0


@dataclass
class BlclConfig:
    d_th: float = 0.9
    max_samples_per_frame: int = 256   # per class
    pseudo_enabled: bool = True
    lv_enabled: bool = True
    cc_enabled: bool = True
    pseudo_start_epoch: int = 1

    def __post_init__(self):
        if not (0.5 < self.d_th <= 1.0):
            raise DataError(f"d_th must lie in (0.5, 1], got {self.d_th} "
                            "(bands > d_th and < 1-d_th must not overlap)")
        if self.max_samples_per_frame < 1:
            raise DataError("max_samples_per_frame must be >= 1")

    def to_dict(self) -> dict:
        return {"d_th": self.d_th,
                "max_samples_per_frame": self.max_samples_per_frame,
                "pseudo_enabled": self.pseudo_enabled,
                "lv_enabled": self.lv_enabled, "cc_enabled": self.cc_enabled,
                "pseudo_start_epoch": self.pseudo_start_epoch}

    @classmethod
    def from_dict(cls, d: dict) -> "BlclConfig":
        return cls(**d)


@dataclass
class PixelPartition:
    fg: torch.Tensor       # [n, D]
    bg: torch.Tensor       # [m, D]
    ignored_count: int


@dataclass
class BlclTerms:
    lv: torch.Tensor
    cc_fg: torch.Tensor
    cc_bg: torch.Tensor
    total: torch.Tensor
    fg_empty: bool         # diagnostics: clip had no foreground samples
    bg_empty: bool


def _flatten_embeddings(emb: torch.Tensor) -> torch.Tensor:
    d, h, w = emb.shape
    return emb.reshape(d, h * w).T


def _take(emb_flat: torch.Tensor, idx: torch.Tensor, cap: int,
          gen: Optional[torch.Generator]) -> torch.Tensor:
    if idx.numel() > cap:
        if gen is None:
            gen = torch.Generator().manual_seed(0)
        perm = torch.randperm(idx.numel(), generator=gen)[:cap]
        idx = idx[perm]
    return emb_flat[idx]


def partition_with_mask(emb: torch.Tensor, mask_ds, cfg: Optional[BlclConfig] = None,
                        gen: Optional[torch.Generator] = None) -> PixelPartition:
    """Foreground = embeddings under the downsampled mask, background = the rest."""
    cfg = cfg if cfg is not None else BlclConfig()
    if not torch.is_tensor(mask_ds):
        mask_ds = torch.as_tensor(mask_ds)
    mask_flat = mask_ds.reshape(-1).bool()
    emb_flat = _flatten_embeddings(emb)
    if mask_flat.numel() != emb_flat.shape[0]:
        raise ValueError(f"mask has {mask_flat.numel()} cells, embeddings have "
                         f"{emb_flat.shape[0]}")
    cap = cfg.max_samples_per_frame
    fg = _take(emb_flat, mask_flat.nonzero(as_tuple=True)[0], cap, gen)
    bg = _take(emb_flat, (~mask_flat).nonzero(as_tuple=True)[0], cap, gen)
    return PixelPartition(fg=fg, bg=bg, ignored_count=0)


def partition_with_pseudo(emb: torch.Tensor, pred_probs: Optional[torch.Tensor],
                          box_ds: Optional[Box], cfg: Optional[BlclConfig] = None,
                          gen: Optional[torch.Generator] = None) -> PixelPartition:
    """Partition a box-supervised (or empty) frame.

    Outside the box every location is background, whatever the score says.
    Inside the box, scores above d_th are foreground, below 1-d_th background,
    anything between is ignored. With pred_probs=None (pseudo masks not yet
    trusted) the whole box interior is ignored. With box_ds=None (object absent)
    everything is background.
    """
    cfg = cfg if cfg is not None else BlclConfig()
    d, h, w = emb.shape
    emb_flat = _flatten_embeddings(emb)
    cap = cfg.max_samples_per_frame

    if box_ds is None:
        all_idx = torch.arange(h * w)
        return PixelPartition(fg=emb_flat[:0], bg=_take(emb_flat, all_idx, cap, gen),
                              ignored_count=0)

    x0, y0, x1, y1 = box_ds
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise ValueError(f"degenerate or out-of-bounds box {box_ds} for grid {h}x{w}")
    inside = torch.zeros(h, w, dtype=torch.bool)
    inside[y0:y1, x0:x1] = True
    inside = inside.reshape(-1)

    if pred_probs is None:
        fg_sel = torch.zeros_like(inside)
        bg_sel = ~inside
    else:
        if pred_probs.shape != (h, w):
            raise ValueError(f"pred_probs shape {tuple(pred_probs.shape)} does not "
                             f"match embedding grid {h}x{w}")
        p = pred_probs.detach().reshape(-1)
        fg_sel = inside & (p > cfg.d_th)
        bg_sel = (~inside) | (inside & (p < 1.0 - cfg.d_th))

    fg = _take(emb_flat, fg_sel.nonzero(as_tuple=True)[0], cap, gen)
    bg = _take(emb_flat, bg_sel.nonzero(as_tuple=True)[0], cap, gen)
    ignored = int(h * w - int(fg_sel.sum()) - int(bg_sel.sum()))
    return PixelPartition(fg=fg, bg=bg, ignored_count=ignored)


# ---------------------------------------------------------------------------
# contrastive losses

def _as_matrix(vectors, ref: torch.Tensor) -> torch.Tensor:
    if torch.is_tensor(vectors):
        return vectors.reshape(-1, ref.shape[-1]) if vectors.numel() else vectors.reshape(0, ref.shape[-1])
    if len(vectors) == 0:
        return ref.new_zeros((0, ref.shape[-1]))
    return torch.stack([torch.as_tensor(v, dtype=ref.dtype) for v in vectors])


def pairwise_contrast(q: torch.Tensor, k_pos, k_neg,
                      clamp: float = CLAMP_LOGIT) -> torch.Tensor:
    """Sigmoid contrast of one query against positive and negative keys.

    (sum_+ -log sig(q.k) + sum_- -log(1 - sig(q.k))) / (|K+| + |K-|), with dot
    products clamped to +-clamp before the log for stability. Both sets empty
    returns 0.
    """
    if not torch.is_tensor(q):
        q = torch.as_tensor(q, dtype=torch.get_default_dtype())
    pos = _as_matrix(k_pos, q)
    neg = _as_matrix(k_neg, q)
    n, m = pos.shape[0], neg.shape[0]
    if n + m == 0:
        return q.new_zeros(())
    total = q.new_zeros(())
    if n:
        total = total - F.logsigmoid((pos @ q).clamp(-clamp, clamp)).sum()
    if m:
        # -log(1 - sig(x)) == -logsigmoid(-x)
        total = total - F.logsigmoid(-(neg @ q).clamp(-clamp, clamp)).sum()
    return total / (n + m)


def lv_contrast(r_s_proj: torch.Tensor,
                partitions: Sequence[PixelPartition]) -> torch.Tensor:
    """Pull the projected sentence feature toward all fg pixels, away from bg."""
    fg = [p.fg for p in partitions if p.fg.shape[0]]
    bg = [p.bg for p in partitions if p.bg.shape[0]]
    k_pos = torch.cat(fg) if fg else r_s_proj.new_zeros((0, r_s_proj.shape[-1]))
    k_neg = torch.cat(bg) if bg else r_s_proj.new_zeros((0, r_s_proj.shape[-1]))
    return pairwise_contrast(r_s_proj, k_pos, k_neg)


@dataclass
class CcResult:
    cc_fg: torch.Tensor
    cc_bg: torch.Tensor
    fg_empty: bool
    bg_empty: bool


def cc_contrast(partitions: Sequence[PixelPartition]) -> CcResult:
    """Consistency contrast against clip-global mean fg/bg anchors."""
    ref = None
    for p in partitions:
        if p.fg.shape[0] or p.bg.shape[0]:
            ref = p.fg if p.fg.shape[0] else p.bg
            break
    if ref is None:
        z = torch.zeros(())
        return CcResult(cc_fg=z, cc_bg=z.clone(), fg_empty=True, bg_empty=True)

    fg_list = [p.fg for p in partitions if p.fg.shape[0]]
    bg_list = [p.bg for p in partitions if p.bg.shape[0]]
    all_fg = torch.cat(fg_list) if fg_list else ref.new_zeros((0, ref.shape[-1]))
    all_bg = torch.cat(bg_list) if bg_list else ref.new_zeros((0, ref.shape[-1]))

    fg_empty = all_fg.shape[0] == 0
    bg_empty = all_bg.shape[0] == 0
    if fg_empty:
        z = ref.new_zeros(())
        return CcResult(cc_fg=z, cc_bg=z.clone(), fg_empty=True, bg_empty=bg_empty)

    anchor_fg = all_fg.mean(dim=0)
    cc_fg = pairwise_contrast(anchor_fg, all_fg, all_bg)
    if bg_empty:
        cc_bg = ref.new_zeros(())
    else:
        anchor_bg = all_bg.mean(dim=0)
        cc_bg = pairwise_contrast(anchor_bg, all_bg, all_fg)
    return CcResult(cc_fg=cc_fg, cc_bg=cc_bg, fg_empty=False, bg_empty=bg_empty)


def blcl_loss(r_s_proj: torch.Tensor, partitions: Sequence[PixelPartition],
              cfg: Optional[BlclConfig] = None) -> BlclTerms:
    """Sum of the enabled contrastive terms over one clip's partitions."""
    cfg = cfg if cfg is not None else BlclConfig()
    zero = r_s_proj.new_zeros(())
    lv = lv_contrast(r_s_proj, partitions) if cfg.lv_enabled else zero
    if cfg.cc_enabled:
        cc = cc_contrast(partitions)
        cc_fg, cc_bg = cc.cc_fg, cc.cc_bg
        fg_empty, bg_empty = cc.fg_empty, cc.bg_empty
    else:
        cc_fg = cc_bg = zero
        any_fg = any(p.fg.shape[0] for p in partitions)
        any_bg = any(p.bg.shape[0] for p in partitions)
        fg_empty, bg_empty = not any_fg, not any_bg
    total = lv + cc_fg + cc_bg
    return BlclTerms(lv=lv, cc_fg=cc_fg, cc_bg=cc_bg, total=total,
                     fg_empty=fg_empty, bg_empty=bg_empty)
