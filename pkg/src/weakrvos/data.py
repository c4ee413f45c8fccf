"""Synthetic referring-video dataset: generation, manifests, supervision schemes, cost.

A video is a handful of moving geometric shapes on a dark background; exactly one
shape (the referent) matches a templated expression such as "the red circle" or
"the square moving left". The generator emits dense masks and tight boxes for every
frame, plus controlled late entry (referent appears after frame 0) and full
occlusion (empty-mask interior frames), so downstream code has to handle absence.

Everything is deterministic given (args, seed): per-video RNG streams are derived
from (seed, video_index), and frames are quantized to uint8 before both the
in-memory sample and the PNG on disk are built from them.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from .errors import DataError

MANIFEST_SCHEMA_VERSION = 1

COLORS = {
    "red": (220, 50, 50),
    "green": (60, 200, 80),
    "blue": (60, 90, 230),
    "yellow": (230, 220, 60),
    "cyan": (60, 210, 210),
    "magenta": (210, 70, 200),
}
SHAPES = ("circle", "square", "triangle")
DIRECTIONS = ("left", "right", "up", "down")
BACKGROUND = np.array((30.0, 30.0, 34.0))

# Closed vocabulary over every word a template can emit, recorded in the manifest.
VOCAB = sorted(set(COLORS) | set(SHAPES) | set(DIRECTIONS) | {"the", "moving"})

P_LATE_ENTRY = 0.3
P_OCCLUSION = 0.2


class Scheme(enum.Enum):
    """Supervision schemes: dense masks, boxes only, one mask, or one mask + boxes."""

    FULL = "full"
    WEAK_B = "weak_b"
    WEAK_M = "weak_m"
    WEAK_MB = "weak_mb"

    @classmethod
    def parse(cls, name: str) -> "Scheme":
        try:
            return cls(name.lower())
        except ValueError:
            raise DataError(f"unknown supervision scheme '{name}'; expected one of "
                            f"{[s.value for s in cls]}") from None


Box = tuple[int, int, int, int]  # (x0, y0, x1, y1), half-open pixel intervals


@dataclass
class VideoSample:
    """One fully-annotated video held in memory."""

    id: str
    frames: np.ndarray            # float32 [T, 3, H, W] in [0, 1]
    tokens: list[int]
    token_text: str
    dense_masks: np.ndarray       # bool [T, H, W]
    boxes: list[Optional[Box]]    # tight box per frame, None when mask empty
    first_appearance: Optional[int]

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    def visible_frames(self) -> list[int]:
        return [t for t in range(self.num_frames) if self.boxes[t] is not None]


@dataclass
class WeakAnnotation:
    """Which frames carry mask supervision and which carry box supervision."""

    scheme: Scheme
    mask_frames: frozenset[int]
    box_frames: frozenset[int]

    def __post_init__(self):
        if self.mask_frames & self.box_frames:
            raise DataError("mask_frames and box_frames overlap: "
                            f"{sorted(self.mask_frames & self.box_frames)}")


@dataclass
class VideoRecord:
    """Manifest entry for one video; image data stays on disk."""

    id: str
    T: int
    H: int
    W: int
    expression: str
    tokens: list[int]
    first_appearance: Optional[int]
    boxes: list[Optional[Box]]
    frame_paths: list[str]        # relative to the dataset root
    mask_paths: list[str]
    split: str = "train"

    def to_dict(self) -> dict:
        return {
            "id": self.id, "T": self.T, "H": self.H, "W": self.W,
            "expression": self.expression, "tokens": list(self.tokens),
            "first_appearance": self.first_appearance,
            "boxes": [list(b) if b is not None else None for b in self.boxes],
            "frames": list(self.frame_paths), "masks": list(self.mask_paths),
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VideoRecord":
        return cls(
            id=d["id"], T=int(d["T"]), H=int(d["H"]), W=int(d["W"]),
            expression=d["expression"], tokens=[int(t) for t in d["tokens"]],
            first_appearance=(None if d["first_appearance"] is None
                              else int(d["first_appearance"])),
            boxes=[tuple(int(v) for v in b) if b is not None else None
                   for b in d["boxes"]],
            frame_paths=list(d["frames"]), mask_paths=list(d["masks"]),
            split=d.get("split", "train"),
        )


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    vocab: list[str]
    records: list[VideoRecord]
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "vocab": list(self.vocab),
            "videos": [r.to_dict() for r in self.records],
        }

    def path_for(self, rel: str) -> Path:
        return Path(self.root) / rel

    def subset(self, split: str) -> "DatasetManifest":
        """View restricted to one split ('all' keeps every record)."""
        if split == "all":
            recs = list(self.records)
        else:
            recs = [r for r in self.records if r.split == split]
        if not recs:
            raise DataError(f"no videos in split '{split}'")
        return dataclasses.replace(self, records=recs)


@dataclass
class CostReport:
    scheme: Scheme
    total_seconds: float
    speedup_vs_full: float
    n_mask_frames: int
    n_box_frames: int
    n_videos: int

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.value,
            "total_seconds": self.total_seconds,
            "speedup_vs_full": self.speedup_vs_full,
            "n_mask_frames": self.n_mask_frames,
            "n_box_frames": self.n_box_frames,
            "n_videos": self.n_videos,
        }


# ---------------------------------------------------------------------------
# rendering

def _shape_mask(kind: str, cx: float, cy: float, r: float,
                yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    if kind == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == "square":
        s = 0.9 * r
        return np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= s
    if kind == "triangle":
        verts = [(cx, cy - r), (cx - 0.95 * r, cy + 0.75 * r),
                 (cx + 0.95 * r, cy + 0.75 * r)]
        signs = []
        for (x1, y1), (x2, y2) in zip(verts, verts[1:] + verts[:1]):
            signs.append((x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1))
        pos = (signs[0] >= 0) & (signs[1] >= 0) & (signs[2] >= 0)
        neg = (signs[0] <= 0) & (signs[1] <= 0) & (signs[2] <= 0)
        return pos | neg
    raise ValueError(f"unknown shape kind '{kind}'")


def tight_box(mask: np.ndarray) -> Optional[Box]:
    """Tight half-open bounding box of a binary mask, None when empty."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def _direction_word(vx: float, vy: float, min_speed: float) -> Optional[str]:
    # dominant axis must be unambiguous for a motion phrase to be truthful
    if abs(vx) >= 1.25 * abs(vy) and abs(vx) >= min_speed:
        return "right" if vx > 0 else "left"
    if abs(vy) >= 1.25 * abs(vx) and abs(vy) >= min_speed:
        return "down" if vy > 0 else "up"
    return None


def _render_video(vid_index: int, T: int, H: int, W: int, seed: int):
    """Returns (uint8 frames [T,H,W,3], bool masks [T,H,W], expression str)."""
    rng = np.random.default_rng([seed, vid_index])
    scale = min(H, W) / 64.0

    late = rng.random() < P_LATE_ENTRY
    occluded = rng.random() < P_OCCLUSION
    n_shapes = int(rng.integers(2, 5))

    pair_idx = rng.choice(len(COLORS) * len(SHAPES), size=n_shapes, replace=False)
    color_names = list(COLORS)
    pairs = [(color_names[int(k) // len(SHAPES)], SHAPES[int(k) % len(SHAPES)])
             for k in pair_idx]

    s_lo, s_hi = 0.10 * min(H, W), 0.18 * min(H, W)
    margin = s_hi * 1.15 + 1.0
    pos = np.zeros((n_shapes, 2))
    vel = np.zeros((n_shapes, 2))
    size0 = np.zeros(n_shapes)
    phase = np.zeros(n_shapes)
    for i in range(n_shapes):
        pos[i] = (rng.uniform(margin, W - 1 - margin),
                  rng.uniform(margin, H - 1 - margin))
        speed = rng.uniform(0.8, 2.5) * scale
        ang = rng.uniform(0.0, 2.0 * math.pi)
        vel[i] = (speed * math.cos(ang), speed * math.sin(ang))
        size0[i] = rng.uniform(s_lo, s_hi)
        phase[i] = rng.uniform(0.0, 2.0 * math.pi)

    t_star = int(rng.integers(1, T)) if (late and T >= 2) else 0
    occ_frame = None
    if occluded and t_star + 1 <= T - 2:
        occ_frame = int(rng.integers(t_star + 1, T - 1))

    bright_phase = rng.uniform(0.0, 2.0 * math.pi)

    ref_color, ref_shape = pairs[0]
    direction = _direction_word(vel[0, 0], vel[0, 1], 0.6 * scale)
    shape_unique = all(s != ref_shape for _, s in pairs[1:])
    candidates = [f"the {ref_color} {ref_shape}"]
    if direction is not None and shape_unique:
        candidates.append(f"the {ref_shape} moving {direction}")
    if direction is not None:
        candidates.append(f"the {ref_color} {ref_shape} moving {direction}")
    expression = candidates[int(rng.integers(0, len(candidates)))]

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    frames = np.zeros((T, H, W, 3), dtype=np.uint8)
    masks = np.zeros((T, H, W), dtype=bool)

    for t in range(T):
        b = 1.0 + 0.08 * math.sin(2.0 * math.pi * t / T + bright_phase)
        canvas = np.broadcast_to(BACKGROUND * b, (H, W, 3)).copy()
        # distractors first, referent last so it is never covered when present
        draw_order = list(range(1, n_shapes)) + [0]
        ref_mask = np.zeros((H, W), dtype=bool)
        for i in draw_order:
            if i == 0 and (t < t_star or t == occ_frame):
                continue
            r_t = size0[i] * (1.0 + 0.1 * math.sin(2.0 * math.pi * t / T + phase[i]))
            m = _shape_mask(pairs[i][1], pos[i, 0], pos[i, 1], r_t, yy, xx)
            canvas[m] = np.array(COLORS[pairs[i][0]], dtype=np.float64) * b
            if i == 0:
                ref_mask = m
        noise = rng.integers(-3, 4, size=(H, W, 1))
        frames[t] = np.clip(np.rint(canvas + noise), 0, 255).astype(np.uint8)
        masks[t] = ref_mask

        pos += vel
        for i in range(n_shapes):
            for a, hi in ((0, W - 1), (1, H - 1)):
                lo_b, hi_b = margin, hi - margin
                if pos[i, a] < lo_b:
                    pos[i, a] = 2 * lo_b - pos[i, a]
                    vel[i, a] = -vel[i, a]
                elif pos[i, a] > hi_b:
                    pos[i, a] = 2 * hi_b - pos[i, a]
                    vel[i, a] = -vel[i, a]

    return frames, masks, expression


def tokenize(expression: str, vocab: Sequence[str]) -> list[int]:
    index = {w: i for i, w in enumerate(vocab)}
    try:
        return [index[w] for w in expression.split()]
    except KeyError as e:
        raise DataError(f"word {e} not in vocabulary") from None


def _sample_from_arrays(vid_id: str, frames_u8: np.ndarray, masks: np.ndarray,
                        expression: str, vocab: Sequence[str]) -> VideoSample:
    frames = (frames_u8.astype(np.float32) / 255.0).transpose(0, 3, 1, 2)
    boxes = [tight_box(m) for m in masks]
    visible = [t for t, b in enumerate(boxes) if b is not None]
    return VideoSample(
        id=vid_id, frames=np.ascontiguousarray(frames),
        tokens=tokenize(expression, vocab), token_text=expression,
        dense_masks=masks.astype(bool), boxes=boxes,
        first_appearance=(min(visible) if visible else None),
    )


# ---------------------------------------------------------------------------
# generation and manifest I/O

def generate_dataset(out_dir: Union[str, Path], n_videos: int, T: int,
                     H: int, W: int, seed: int,
                     val_fraction: float = 0.0) -> DatasetManifest:
    """Generate a dataset directory (frames/, masks/, manifest.json).

    val_fraction marks the trailing round(n_videos * val_fraction) videos as
    split "val"; everything else is "train".
    """
    if H % 32 != 0 or W % 32 != 0:
        raise DataError(f"H and W must be divisible by 32, got {H}x{W}")
    if T < 2:
        raise DataError(f"need T >= 2 frames, got {T}")
    if n_videos < 1:
        raise DataError(f"need n_videos >= 1, got {n_videos}")

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    n_val = int(round(n_videos * val_fraction))

    records = []
    for v in range(n_videos):
        vid_id = f"vid_{v:04d}"
        frames_u8, masks, expression = _render_video(v, T, H, W, seed)
        sample = _sample_from_arrays(vid_id, frames_u8, masks, expression, VOCAB)

        frame_dir = root / "frames" / vid_id
        mask_dir = root / "masks" / vid_id
        frame_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        frame_paths, mask_paths = [], []
        for t in range(T):
            fp = f"frames/{vid_id}/{t:03d}.png"
            mp = f"masks/{vid_id}/{t:03d}.png"
            Image.fromarray(frames_u8[t]).save(root / fp)
            Image.fromarray((masks[t].astype(np.uint8)) * 255, mode="L").save(root / mp)
            frame_paths.append(fp)
            mask_paths.append(mp)

        records.append(VideoRecord(
            id=vid_id, T=T, H=H, W=W, expression=expression,
            tokens=sample.tokens, first_appearance=sample.first_appearance,
            boxes=sample.boxes, frame_paths=frame_paths, mask_paths=mask_paths,
            split=("val" if v >= n_videos - n_val else "train"),
        ))

    manifest = DatasetManifest(root=root, seed=seed, vocab=list(VOCAB),
                               records=records)
    save_manifest(manifest, root / "manifest.json")
    return manifest


def save_manifest(manifest: DatasetManifest, path: Union[str, Path, None] = None) -> Path:
    path = Path(path) if path is not None else Path(manifest.root) / "manifest.json"
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}") from None

    version = d.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise DataError(f"manifest schema_version {version} unsupported "
                        f"(expected {MANIFEST_SCHEMA_VERSION})")
    root = path.parent
    manifest = DatasetManifest(
        root=root, seed=int(d["seed"]), vocab=list(d["vocab"]),
        records=[VideoRecord.from_dict(r) for r in d["videos"]],
        schema_version=version,
    )
    vocab_size = len(manifest.vocab)
    for rec in manifest.records:
        if any(t < 0 or t >= vocab_size for t in rec.tokens):
            raise DataError(f"video {rec.id}: token id out of range for "
                            f"vocabulary of size {vocab_size}")
        for rel in list(rec.frame_paths) + list(rec.mask_paths):
            if not (root / rel).exists():
                raise DataError(f"missing file referenced by manifest: {root / rel}")
    return manifest


def load_masks(manifest: DatasetManifest, record: Union[VideoRecord, str]) -> np.ndarray:
    """Ground-truth masks only, as bool [T, H, W] (cheaper than load_sample)."""
    if isinstance(record, str):
        matches = [r for r in manifest.records if r.id == record]
        if not matches:
            raise DataError(f"video id '{record}' not in manifest")
        record = matches[0]
    masks = np.zeros((record.T, record.H, record.W), dtype=bool)
    for t in range(record.T):
        mk = np.asarray(Image.open(manifest.path_for(record.mask_paths[t])))
        if mk.ndim != 2 or mk.shape != (record.H, record.W):
            raise DataError(f"{record.mask_paths[t]}: mask shape {mk.shape} does not "
                            f"match manifest ({record.H}, {record.W})")
        bad = np.setdiff1d(np.unique(mk), [0, 255])
        if bad.size:
            raise DataError(f"{record.mask_paths[t]}: non-binary mask values "
                            f"{bad.tolist()} (expected only 0 and 255)")
        masks[t] = mk == 255
    return masks


def load_sample(manifest: DatasetManifest, record: Union[VideoRecord, str]) -> VideoSample:
    if isinstance(record, str):
        matches = [r for r in manifest.records if r.id == record]
        if not matches:
            raise DataError(f"video id '{record}' not in manifest")
        record = matches[0]

    frames_u8 = np.zeros((record.T, record.H, record.W, 3), dtype=np.uint8)
    for t in range(record.T):
        fr = np.asarray(Image.open(manifest.path_for(record.frame_paths[t])).convert("RGB"))
        if fr.shape != (record.H, record.W, 3):
            raise DataError(f"{record.frame_paths[t]}: frame shape {fr.shape} does not "
                            f"match manifest ({record.H}, {record.W}, 3)")
        frames_u8[t] = fr
    masks = load_masks(manifest, record)
    return _sample_from_arrays(record.id, frames_u8, masks, record.expression,
                               manifest.vocab)


# ---------------------------------------------------------------------------
# supervision schemes and annotation cost

def convert_annotation(sample: Union[VideoSample, VideoRecord],
                       scheme: Union[Scheme, str]) -> WeakAnnotation:
    """Reduce dense annotation to one of the four supervision schemes."""
    scheme = Scheme.parse(scheme) if isinstance(scheme, str) else scheme
    boxes = sample.boxes
    visible = {t for t, b in enumerate(boxes) if b is not None}
    t_star = sample.first_appearance

    if scheme in (Scheme.WEAK_M, Scheme.WEAK_MB) and t_star is None:
        raise DataError(f"video {sample.id}: referent never appears; "
                        f"scheme {scheme.value} needs a first-appearance mask")

    if scheme is Scheme.FULL:
        mask_frames, box_frames = visible, set()
    elif scheme is Scheme.WEAK_B:
        mask_frames, box_frames = set(), visible
    elif scheme is Scheme.WEAK_M:
        mask_frames, box_frames = {t_star}, set()
    else:  # WEAK_MB
        mask_frames, box_frames = {t_star}, visible - {t_star}
    return WeakAnnotation(scheme=scheme, mask_frames=frozenset(mask_frames),
                          box_frames=frozenset(box_frames))


def annotation_cost(manifest: DatasetManifest, scheme: Union[Scheme, str],
                    mask_seconds: float = 79.0,
                    box_seconds: float = 7.0) -> CostReport:
    """Total labeling time under a scheme and its speedup over dense masks."""
    scheme = Scheme.parse(scheme) if isinstance(scheme, str) else scheme
    if not manifest.records:
        raise DataError("empty manifest")

    def cost_of(s: Scheme) -> tuple[float, int, int]:
        total, n_mask, n_box = 0.0, 0, 0
        for rec in manifest.records:
            ann = convert_annotation(rec, s)
            n_mask += len(ann.mask_frames)
            n_box += len(ann.box_frames)
            total += len(ann.mask_frames) * mask_seconds + len(ann.box_frames) * box_seconds
        return total, n_mask, n_box

    total, n_mask, n_box = cost_of(scheme)
    full_total, _, _ = cost_of(Scheme.FULL)
    if total > 0:
        speedup = full_total / total
    else:
        speedup = 1.0 if full_total == 0 else float("inf")
    return CostReport(scheme=scheme, total_seconds=total, speedup_vs_full=speedup,
                      n_mask_frames=n_mask, n_box_frames=n_box,
                      n_videos=len(manifest.records))
