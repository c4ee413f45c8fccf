"""Training orchestration: clip sampling, supervision wiring, loss assembly,
the two-group AdamW step with gradient clipping, step-decay scheduling,
pseudo-mask epoch gating, JSON-lines logging, and resumable checkpoints.

The per-clip loss is the sum over frames of the piecewise segmentation loss
and the cross-frame loss, plus the clip-level contrastive loss; a batch step
averages that over its clips. All randomness is derived statelessly from
(seed, epoch, step) so resumed runs follow the exact same trajectory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .contrast import BlclConfig, blcl_loss, partition_with_mask, partition_with_pseudo
from .data import (DatasetManifest, Scheme, VideoSample, WeakAnnotation,
                   convert_annotation, load_sample)
from .errors import DataError, NumericError
from .losses import (LgcfsMode, LossWeights, SupervisionTarget, TargetKind,
                     downsample_mask, lgcfs_loss, rescale_box, seg_loss)
from .model import (ModelConfig, RvosNet, decode_array, encode_array,
                    load_checkpoint, save_checkpoint, segment)

STRIDE = 4

# Desk-scale defaults. The reference schedule for large-corpus training
# (lr 5e-5, backbone at half) stalls on tiny synthetic sets; the ratio is kept
# (backbone = lr/2) with a base lr that overfits 20 videos within 2k steps.
DEFAULT_LR = 2e-3


@dataclass
class TrainConfig:
    clip_len: int = 5
    batch_clips: int = 8
    lr: float = DEFAULT_LR
    lr_backbone: Optional[float] = None           # None -> lr / 2
    epochs: int = 20
    lr_decay_epochs: Optional[list[int]] = None   # None -> [epochs/2, epochs*5/6]
    lr_decay_factor: float = 0.1
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    scheme: Scheme = Scheme.WEAK_MB
    lgcfs_mode: LgcfsMode = LgcfsMode.FULL_NOAVG
    blcl: BlclConfig = field(default_factory=BlclConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    model: Optional[ModelConfig] = None
    hflip: bool = False
    checkpoint_every: int = 0                     # epochs between extra snapshots

    def __post_init__(self):
        if isinstance(self.scheme, str):
            self.scheme = Scheme.parse(self.scheme)
        if isinstance(self.lgcfs_mode, str):
            self.lgcfs_mode = LgcfsMode.parse(self.lgcfs_mode)
        if isinstance(self.blcl, dict):
            self.blcl = BlclConfig.from_dict(self.blcl)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights.from_dict(self.loss_weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.clip_len < 1:
            raise DataError("clip_len must be >= 1")
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")
        if self.batch_clips < 1:
            raise DataError("batch_clips must be >= 1")

    @property
    def effective_lr_backbone(self) -> float:
        return self.lr / 2.0 if self.lr_backbone is None else self.lr_backbone

    @property
    def effective_decay_epochs(self) -> list[int]:
        if self.lr_decay_epochs is not None:
            return list(self.lr_decay_epochs)
        # mirrors decaying at 9/18 and 15/18 of the run
        return sorted({int(round(self.epochs / 2)), int(round(self.epochs * 5 / 6))})

    def to_dict(self) -> dict:
        return {
            "clip_len": self.clip_len, "batch_clips": self.batch_clips,
            "lr": self.lr, "lr_backbone": self.lr_backbone,
            "epochs": self.epochs, "lr_decay_epochs": self.lr_decay_epochs,
            "lr_decay_factor": self.lr_decay_factor,
            "weight_decay": self.weight_decay, "grad_clip": self.grad_clip,
            "seed": self.seed, "scheme": self.scheme.value,
            "lgcfs_mode": self.lgcfs_mode.value,
            "blcl": self.blcl.to_dict(), "loss_weights": self.loss_weights.to_dict(),
            "model": self.model.to_dict() if self.model is not None else None,
            "hflip": self.hflip, "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossReport:
    seg: float
    lgcfs: float
    lv: float
    cc_fg: float
    cc_bg: float
    total: float
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"seg": self.seg, "lgcfs": self.lgcfs, "lv": self.lv,
                "cc_fg": self.cc_fg, "cc_bg": self.cc_bg, "total": self.total,
                "diagnostics": dict(self.diagnostics)}


@dataclass
class Clip:
    sample: VideoSample
    frame_indices: list[int]
    annotation: WeakAnnotation


# ---------------------------------------------------------------------------
# sampling and target construction

def sample_clip(video: Union[VideoSample, int], T: int, rng: np.random.Generator,
                must_include: Optional[int] = None) -> list[int]:
    """Uniformly random contiguous window of length min(T, len(video)),
    constrained to contain must_include when given."""
    n = video.num_frames if isinstance(video, VideoSample) else int(video)
    win = min(T, n)
    lo, hi = 0, n - win
    if must_include is not None:
        if not (0 <= must_include < n):
            raise DataError(f"must_include frame {must_include} outside video of length {n}")
        lo = max(lo, must_include - win + 1)
        hi = min(hi, must_include)
    start = int(rng.integers(lo, hi + 1))
    return list(range(start, start + win))


def build_targets(sample: VideoSample, annotation: WeakAnnotation,
                  frame_indices: Sequence[int]) -> list[SupervisionTarget]:
    targets = []
    for t in frame_indices:
        if t in annotation.mask_frames:
            targets.append(SupervisionTarget(kind=TargetKind.MASK,
                                             mask=sample.dense_masks[t]))
        elif t in annotation.box_frames:
            targets.append(SupervisionTarget(kind=TargetKind.BOX,
                                             box=sample.boxes[t]))
        else:
            targets.append(SupervisionTarget(kind=TargetKind.NONE))
    return targets


# ---------------------------------------------------------------------------
# loss assembly

_DIAG_KEYS = ("fg_from_mask_frames", "bg_from_mask_frames",
              "fg_from_box_frames", "bg_from_box_frames",
              "ignored_from_box_frames", "bg_from_empty_frames",
              "clips_with_empty_fg")


def _clip_loss(net: RvosNet, clip: Clip, cfg: TrainConfig, pseudo_active: bool,
               gen: Optional[torch.Generator]):
    frames = torch.from_numpy(clip.sample.frames[clip.frame_indices])
    targets = build_targets(clip.sample, clip.annotation, clip.frame_indices)
    out = net.forward_clip(frames, clip.sample.tokens)
    n_frames = len(targets)
    w = cfg.loss_weights
    zero = out.logits.new_zeros(())

    seg_total = zero
    for t in range(n_frames):
        seg_total = seg_total + seg_loss(out.logits[t], targets[t], w, STRIDE)

    lgcfs_total = zero
    if cfg.lgcfs_mode is not LgcfsMode.OFF and n_frames > 1:
        n_box = sum(1 for tg in targets if tg.kind is TargetKind.BOX)
        for t in range(n_frames):
            tg = targets[t]
            if tg.kind is TargetKind.NONE:
                continue
            if cfg.lgcfs_mode is LgcfsMode.FIRST_FRAME and tg.kind is not TargetKind.MASK:
                continue
            cross = {tau: segment(out.bundles[t].f_enh, out.filters[tau],
                                  net.filter_dims)
                     for tau in range(n_frames) if tau != t}
            lgcfs_total = lgcfs_total + lgcfs_loss(
                cross, tg, w, cfg.lgcfs_mode, STRIDE,
                n_box_frames=(n_box if n_box else None))

    diag = {k: 0 for k in _DIAG_KEYS}
    lv = cc_fg = cc_bg = zero
    if cfg.blcl.lv_enabled or cfg.blcl.cc_enabled:
        partitions = []
        for t in range(n_frames):
            emb = out.bundles[t].h
            tg = targets[t]
            if tg.kind is TargetKind.MASK:
                part = partition_with_mask(emb, downsample_mask(tg.mask, STRIDE),
                                           cfg.blcl, gen)
                diag["fg_from_mask_frames"] += int(part.fg.shape[0])
                diag["bg_from_mask_frames"] += int(part.bg.shape[0])
            elif tg.kind is TargetKind.BOX:
                gh, gw = emb.shape[1:]
                box_g = rescale_box(tg.box, STRIDE, gh, gw)
                probs = torch.sigmoid(out.logits[t]).detach() if pseudo_active else None
                part = partition_with_pseudo(emb, probs, box_g, cfg.blcl, gen)
                diag["fg_from_box_frames"] += int(part.fg.shape[0])
                diag["bg_from_box_frames"] += int(part.bg.shape[0])
                diag["ignored_from_box_frames"] += part.ignored_count
            else:
                part = partition_with_pseudo(emb, None, None, cfg.blcl, gen)
                diag["bg_from_empty_frames"] += int(part.bg.shape[0])
            partitions.append(part)
        terms = blcl_loss(out.r_s_proj, partitions, cfg.blcl)
        lv, cc_fg, cc_bg = terms.lv, terms.cc_fg, terms.cc_bg
        diag["clips_with_empty_fg"] += int(terms.fg_empty)

    parts = {"seg": seg_total, "lgcfs": lgcfs_total, "lv": lv,
             "cc_fg": cc_fg, "cc_bg": cc_bg}
    return parts, diag


def make_optimizer(net: RvosNet, cfg: TrainConfig) -> torch.optim.AdamW:
    backbone_ids = {id(p) for p in net.visual.parameters()}
    backbone = [p for p in net.parameters() if id(p) in backbone_ids]
    rest = [p for p in net.parameters() if id(p) not in backbone_ids]
    return torch.optim.AdamW(
        [{"params": backbone, "lr": cfg.effective_lr_backbone},
         {"params": rest, "lr": cfg.lr}],
        weight_decay=cfg.weight_decay)


def set_epoch_lr(optimizer: torch.optim.Optimizer, cfg: TrainConfig,
                 epoch: int) -> tuple[float, float]:
    """Step decay: multiply by lr_decay_factor once per decay epoch reached."""
    factor = cfg.lr_decay_factor ** sum(1 for d in cfg.effective_decay_epochs
                                        if epoch >= d)
    lr_b = cfg.effective_lr_backbone * factor
    lr_r = cfg.lr * factor
    optimizer.param_groups[0]["lr"] = lr_b
    optimizer.param_groups[1]["lr"] = lr_r
    return lr_b, lr_r


def train_step(net: RvosNet, optimizer: torch.optim.Optimizer,
               batch: Sequence[Clip], cfg: TrainConfig, epoch: int,
               gen: Optional[torch.Generator] = None) -> LossReport:
    """One optimizer update over a batch of clips; returns per-term batch means."""
    if not batch:
        raise DataError("empty batch")
    pseudo_active = cfg.blcl.pseudo_enabled and epoch >= cfg.blcl.pseudo_start_epoch

    optimizer.zero_grad(set_to_none=True)
    sums = {k: 0.0 for k in ("seg", "lgcfs", "lv", "cc_fg", "cc_bg")}
    diag_total = {k: 0 for k in _DIAG_KEYS}
    diag_total["pseudo_active"] = pseudo_active
    batch_loss = None

    for clip in batch:
        parts, diag = _clip_loss(net, clip, cfg, pseudo_active, gen)
        for name, val in parts.items():
            if not torch.isfinite(val):
                dump = {k: float(v.detach()) for k, v in parts.items()}
                raise NumericError(f"non-finite loss term '{name}' on video "
                                   f"{clip.sample.id}: {dump}")
            sums[name] += float(val.detach())
        clip_total = sum(parts.values())
        batch_loss = clip_total if batch_loss is None else batch_loss + clip_total
        for k in _DIAG_KEYS:
            diag_total[k] += diag[k]

    batch_loss = batch_loss / len(batch)
    batch_loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
    optimizer.step()

    n = len(batch)
    means = {k: v / n for k, v in sums.items()}
    return LossReport(seg=means["seg"], lgcfs=means["lgcfs"], lv=means["lv"],
                      cc_fg=means["cc_fg"], cc_bg=means["cc_bg"],
                      total=sum(means.values()), diagnostics=diag_total)


# ---------------------------------------------------------------------------
# optimizer state (de)serialization for resumable checkpoints

def _optimizer_to_json(opt: torch.optim.Optimizer) -> dict:
    sd = opt.state_dict()
    state = {}
    for k, v in sd["state"].items():
        entry = {}
        for name, item in v.items():
            if torch.is_tensor(item) and item.dim() == 0:
                entry[name] = {"scalar": float(item)}
            elif torch.is_tensor(item):
                entry[name] = encode_array(item)
            else:
                entry[name] = {"scalar": float(item)}
        state[str(k)] = entry
    groups = []
    for g in sd["param_groups"]:
        g = dict(g)
        g["betas"] = list(g["betas"])
        groups.append(g)
    return {"state": state, "param_groups": groups}


def _optimizer_from_json(d: dict) -> dict:
    state = {}
    for k, v in d["state"].items():
        entry = {}
        for name, item in v.items():
            if "scalar" in item:
                entry[name] = torch.tensor(item["scalar"])
            else:
                entry[name] = decode_array(item)
        state[int(k)] = entry
    groups = []
    for g in d["param_groups"]:
        g = dict(g)
        g["betas"] = tuple(g["betas"])
        groups.append(g)
    return {"state": state, "param_groups": groups}


# ---------------------------------------------------------------------------
# fit / predict

def _resolve_model_config(manifest: DatasetManifest, cfg: TrainConfig) -> ModelConfig:
    if cfg.model is not None:
        mcfg = cfg.model
        if mcfg.vocab_size != len(manifest.vocab):
            raise DataError(f"model vocab_size {mcfg.vocab_size} does not match "
                            f"dataset vocabulary of {len(manifest.vocab)} words")
        return mcfg
    return ModelConfig(vocab_size=len(manifest.vocab), seed=cfg.seed)


def _chunks(seq: Sequence[int], size: int):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def fit(manifest: DatasetManifest, cfg: TrainConfig, out_dir: Union[str, Path],
        resume: bool = False) -> Path:
    """Train on every video in the manifest; returns the final checkpoint path.

    Writes out_dir/train_log.jsonl (one LossReport per step), a rolling
    checkpoint_last.json with optimizer state after every epoch, and
    checkpoint_final.json at the end.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    last_path = out / "checkpoint_last.json"
    log_path = out / "train_log.jsonl"

    samples = [load_sample(manifest, r) for r in manifest.records]
    annotations = [convert_annotation(s, cfg.scheme) for s in samples]

    mcfg = _resolve_model_config(manifest, cfg)
    net = RvosNet(mcfg)
    optimizer = make_optimizer(net, cfg)
    start_epoch, global_step = 0, 0

    if resume and last_path.exists():
        net, extra = load_checkpoint(last_path)
        optimizer = make_optimizer(net, cfg)
        optimizer.load_state_dict(_optimizer_from_json(extra["optimizer"]))
        start_epoch = int(extra["epoch"]) + 1
        global_step = int(extra["global_step"])

    mode = "a" if (resume and start_epoch > 0) else "w"
    with open(log_path, mode, encoding="utf-8") as log_f:
        for epoch in range(start_epoch, cfg.epochs):
            lr_b, lr_r = set_epoch_lr(optimizer, cfg, epoch)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
            for batch_i, chunk in enumerate(_chunks(list(order), cfg.batch_clips)):
                rng = np.random.default_rng([cfg.seed, epoch, batch_i])
                gen_seed = np.random.SeedSequence([cfg.seed, epoch, batch_i]).generate_state(1)[0]
                gen = torch.Generator().manual_seed(int(gen_seed))
                clips = []
                for vi in chunk:
                    sample, ann = samples[vi], annotations[vi]
                    must = min(ann.mask_frames) if len(ann.mask_frames) == 1 else None
                    idx = sample_clip(sample, cfg.clip_len, rng, must_include=must)
                    if cfg.hflip and rng.random() < 0.5:
                        sample = _flipped_sample(sample)
                    clips.append(Clip(sample=sample, frame_indices=idx, annotation=ann))
                report = train_step(net, optimizer, clips, cfg, epoch, gen=gen)
                row = {"step": global_step, "epoch": epoch,
                       "lr": lr_r, "lr_backbone": lr_b, **report.to_dict()}
                log_f.write(json.dumps(row, sort_keys=True) + "\n")
                log_f.flush()
                global_step += 1

            extra = {"epoch": epoch, "global_step": global_step,
                     "optimizer": _optimizer_to_json(optimizer),
                     "train_config": cfg.to_dict()}
            save_checkpoint(net, last_path, extra=extra)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(net, out / f"checkpoint_epoch_{epoch:04d}.json",
                                extra=extra)

    final = out / "checkpoint_final.json"
    save_checkpoint(net, final, extra={"epoch": cfg.epochs - 1,
                                       "global_step": global_step,
                                       "train_config": cfg.to_dict()})
    return final


def _flipped_sample(sample: VideoSample) -> VideoSample:
    masks = np.ascontiguousarray(sample.dense_masks[:, :, ::-1])
    width = sample.frames.shape[-1]
    boxes = []
    for b in sample.boxes:
        boxes.append(None if b is None else (width - b[2], b[1], width - b[0], b[3]))
    return replace(sample,
                   frames=np.ascontiguousarray(sample.frames[:, :, :, ::-1]),
                   dense_masks=masks, boxes=boxes)


def predict(checkpoint: Union[str, Path, RvosNet], manifest: DatasetManifest,
            progress: bool = False) -> dict[str, np.ndarray]:
    """Own-frame inference: per-video [T, H, W] float32 probability masks."""
    if isinstance(checkpoint, RvosNet):
        net = checkpoint
    else:
        net, _ = load_checkpoint(checkpoint)
    if net.cfg.vocab_size != len(manifest.vocab):
        raise DataError(f"vocab mismatch: checkpoint encoder expects "
                        f"{net.cfg.vocab_size} words, dataset vocabulary has "
                        f"{len(manifest.vocab)}")
    was_training = net.training
    net.eval()
    preds = {}
    with torch.no_grad():
        for rec in manifest.records:
            sample = load_sample(manifest, rec)
            out = net.forward_clip(torch.from_numpy(sample.frames), sample.tokens)
            up = F.interpolate(out.logits.unsqueeze(1), size=(rec.H, rec.W),
                               mode="bilinear", align_corners=False).squeeze(1)
            preds[rec.id] = torch.sigmoid(up).numpy().astype(np.float32)
    if was_training:
        net.train()
    return preds
