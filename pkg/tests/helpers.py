"""Small builders shared by the tests."""

import json
from pathlib import Path

import numpy as np
from PIL import Image

from weakrvos.data import VOCAB, DatasetManifest, VideoRecord, save_manifest


def write_flat_dataset(root, frames_per_video, H=32, W=32,
                       box=(8, 8, 16, 16), first_appearance=0):
    """Dataset whose records all point at one shared frame/mask PNG pair.

    Cost accounting and manifest validation only need the files to exist and
    the per-frame boxes to be populated, so this is enough to express an exact
    frame count per video without rendering anything.
    """
    root = Path(root)
    (root / "shared").mkdir(parents=True, exist_ok=True)
    frame = np.zeros((H, W, 3), dtype=np.uint8)
    mask = np.zeros((H, W), dtype=np.uint8)
    x0, y0, x1, y1 = box
    mask[y0:y1, x0:x1] = 255
    frame[y0:y1, x0:x1] = (200, 40, 40)
    Image.fromarray(frame).save(root / "shared" / "frame.png")
    Image.fromarray(mask, mode="L").save(root / "shared" / "mask.png")

    expression = "the red circle"
    tokens = [VOCAB.index(w) for w in expression.split()]
    records = []
    for v, T in enumerate(frames_per_video):
        records.append(VideoRecord(
            id=f"vid_{v:04d}", T=T, H=H, W=W,
            expression=expression, tokens=tokens,
            first_appearance=first_appearance,
            boxes=[box] * T,
            frame_paths=["shared/frame.png"] * T,
            mask_paths=["shared/mask.png"] * T,
        ))
    manifest = DatasetManifest(root=root, seed=0, vocab=list(VOCAB),
                               records=records)
    save_manifest(manifest)
    return manifest


def cost_example_dataset(root):
    """10 videos totalling 273 frames (7x27 + 3x28), all frames visible."""
    return write_flat_dataset(root, [27] * 7 + [28] * 3)


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
