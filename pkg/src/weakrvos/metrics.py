"""Evaluation: region IoU (J), boundary measure (F), J&F, precision at IoU
thresholds, and mAP over thresholds 0.5:0.05:0.95, aggregated per video and
over the dataset.

Frames where the ground truth is empty are excluded from J/F averaging (the
object simply is not there yet); predicted foreground on such frames is logged
as a false-positive-area diagnostic instead. Empty-vs-empty comparisons score
1.0 for both J and F.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import DatasetManifest, load_masks
from .errors import DataError

MAP_THRESHOLDS = tuple(0.5 + 0.05 * k for k in range(10))
PRECISION_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary grids; both empty counts as 1.0."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbor outside the mask
    (out-of-grid counts as background)."""
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def _shift(mask: np.ndarray, di: int, dj: int) -> np.ndarray:
    """Translate a binary grid by (di, dj), filling with False."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    src_i = slice(max(0, -di), min(h, h - di))
    src_j = slice(max(0, -dj), min(w, w - dj))
    dst_i = slice(max(0, di), min(h, h + di))
    dst_j = slice(max(0, dj), min(w, w + dj))
    if src_i.start < src_i.stop and src_j.start < src_j.stop:
        out[dst_i, dst_j] = mask[src_i, src_j]
    return out


def _dilate_disk(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.copy()
    out = np.zeros_like(mask)
    r2 = radius * radius
    for di in range(-radius, radius + 1):
        for dj in range(-radius, radius + 1):
            if di * di + dj * dj <= r2:
                out |= _shift(mask, di, dj)
    return out


def boundary_f(pred: np.ndarray, gt: np.ndarray, tol_fraction: float = 0.008) -> float:
    """Boundary F-measure with a disk tolerance of ceil(tol_fraction * diagonal)."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not pred.any() and not gt.any():
        return 1.0

    h, w = pred.shape
    radius = math.ceil(tol_fraction * math.hypot(h, w))
    pb = _boundary(pred)
    gb = _boundary(gt)
    n_pb, n_gb = int(pb.sum()), int(gb.sum())
    if n_pb == 0 or n_gb == 0:
        # one mask empty, the other not: no boundary agreement possible
        return 0.0
    gb_dil = _dilate_disk(gb, radius)
    pb_dil = _dilate_disk(pb, radius)
    precision = float((pb & gb_dil).sum() / n_pb)
    recall = float((gb & pb_dil).sum() / n_gb)
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def precision_at(iou_per_frame: Sequence[float], threshold: float,
                 strict: bool = True) -> float:
    """Fraction of frames with IoU above the threshold (strictly, by default)."""
    ious = list(iou_per_frame)
    if not ious:
        return 0.0
    if strict:
        hits = sum(1 for v in ious if v > threshold)
    else:
        hits = sum(1 for v in ious if v >= threshold)
    return hits / len(ious)


def mean_ap(iou_per_frame: Sequence[float], strict: bool = True) -> float:
    """Mean of precision_at over thresholds 0.5, 0.55, ..., 0.95."""
    return float(np.mean([precision_at(iou_per_frame, t, strict=strict)
                          for t in MAP_THRESHOLDS]))


@dataclass
class EvalReport:
    J_mean: float
    F_mean: float
    JF_mean: float
    precision_at: dict[float, float]
    map_50_95: float
    per_video: list[dict]
    false_positive_area: float = 0.0
    n_videos: int = 0
    n_frames: int = 0

    def to_dict(self) -> dict:
        return {
            "J_mean": self.J_mean, "F_mean": self.F_mean, "JF_mean": self.JF_mean,
            "precision_at": {f"{t:g}": v for t, v in self.precision_at.items()},
            "map_50_95": self.map_50_95,
            "per_video": self.per_video,
            "false_positive_area": self.false_positive_area,
            "n_videos": self.n_videos, "n_frames": self.n_frames,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            J_mean=d["J_mean"], F_mean=d["F_mean"], JF_mean=d["JF_mean"],
            precision_at={float(k): v for k, v in d["precision_at"].items()},
            map_50_95=d["map_50_95"], per_video=list(d["per_video"]),
            false_positive_area=d.get("false_positive_area", 0.0),
            n_videos=d.get("n_videos", 0), n_frames=d.get("n_frames", 0),
        )


def evaluate(predictions: Mapping[str, np.ndarray], manifest: DatasetManifest,
             binarize_threshold: float = 0.5, tol_fraction: float = 0.008,
             strict: bool = True) -> EvalReport:
    """Score probability predictions ({video id: [T,H,W] in [0,1]}) against
    the manifest's ground-truth masks.

    Per-video J/F average over visible frames only; the dataset mean averages
    videos (videos with no visible frame are skipped). P@X and mAP pool frame
    IoUs over the whole dataset.
    """
    per_video = []
    pooled_ious: list[float] = []
    fp_areas: list[float] = []
    n_frames = 0

    for rec in manifest.records:
        if rec.id not in predictions:
            raise DataError(f"no prediction supplied for video {rec.id}")
        probs = np.asarray(predictions[rec.id])
        if probs.shape != (rec.T, rec.H, rec.W):
            raise DataError(f"prediction for {rec.id} has shape {probs.shape}, "
                            f"expected {(rec.T, rec.H, rec.W)}")
        gt = load_masks(manifest, rec)
        pred_bin = probs > binarize_threshold

        js, fs = [], []
        for t in range(rec.T):
            if gt[t].any():
                js.append(iou(pred_bin[t], gt[t]))
                fs.append(boundary_f(pred_bin[t], gt[t], tol_fraction=tol_fraction))
            else:
                fp_areas.append(float(pred_bin[t].mean()))
        if not js:
            continue
        pooled_ious.extend(js)
        n_frames += len(js)
        per_video.append({"id": rec.id, "J": float(np.mean(js)), "F": float(np.mean(fs))})

    if not per_video:
        raise DataError("no video with a visible ground-truth object to evaluate")

    j_mean = float(np.mean([v["J"] for v in per_video]))
    f_mean = float(np.mean([v["F"] for v in per_video]))
    return EvalReport(
        J_mean=j_mean, F_mean=f_mean, JF_mean=(j_mean + f_mean) / 2.0,
        precision_at={t: precision_at(pooled_ious, t, strict=strict)
                      for t in PRECISION_THRESHOLDS},
        map_50_95=mean_ap(pooled_ious, strict=strict),
        per_video=per_video,
        false_positive_area=float(np.mean(fp_areas)) if fp_areas else 0.0,
        n_videos=len(per_video), n_frames=n_frames,
    )
