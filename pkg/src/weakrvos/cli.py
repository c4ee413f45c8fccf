"""Command-line interface: dataset generation, supervision conversion,
annotation-cost reports, training, evaluation, and ablation grids.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Errors print one machine-parsable JSON line to stderr. The RVOS_SEED
environment variable overrides the training seed for CI runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .data import (DatasetManifest, Scheme, annotation_cost, convert_annotation,
                   generate_dataset, load_manifest)
from .errors import DataError, NumericError, WeakRvosError
from .losses import LgcfsMode
from .metrics import evaluate
from .train import TrainConfig, fit, predict


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got '{text}'")


def _parse_blcl_toggles(text: str) -> dict:
    text = text.strip().lower()
    if text in ("none", "off", ""):
        return {"lv_enabled": False, "cc_enabled": False, "pseudo_enabled": False}
    parts = {p.strip() for p in text.split(",") if p.strip()}
    unknown = parts - {"lv", "cc", "pseudo"}
    if unknown:
        raise DataError(f"unknown blcl toggles {sorted(unknown)}; "
                        "expected a comma list over lv,cc,pseudo or 'none'")
    return {"lv_enabled": "lv" in parts, "cc_enabled": "cc" in parts,
            "pseudo_enabled": "pseudo" in parts}


def _train_split(manifest: DatasetManifest) -> DatasetManifest:
    recs = [r for r in manifest.records if r.split != "val"]
    if not recs:
        raise DataError("no training videos (every record is in the val split)")
    return dataclasses.replace(manifest, records=recs)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="weakrvos",
        description="Referring video object segmentation from weak annotation: "
                    "synthetic data, training, evaluation, ablations.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    fmt = argparse.ArgumentDefaultsHelpFormatter

    g = sub.add_parser("gen-data", formatter_class=fmt,
                       help="generate a synthetic dataset directory")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--videos", type=int, default=50, help="number of videos")
    g.add_argument("--frames", type=int, default=5, help="frames per video")
    g.add_argument("--size", type=_parse_size, default=(64, 64),
                   metavar="HxW", help="frame size, H and W divisible by 32")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("--val-fraction", type=float, default=0.0,
                   help="fraction of trailing videos marked split=val")
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("convert", formatter_class=fmt,
                       help="write a supervision overlay for a scheme")
    c.add_argument("--data", required=True, help="dataset directory")
    c.add_argument("--scheme", required=True,
                   choices=[s.value for s in Scheme], help="supervision scheme")
    c.add_argument("--out", required=True, help="directory for supervision.json")
    c.set_defaults(func=cmd_convert)

    k = sub.add_parser("cost", formatter_class=fmt,
                       help="annotation-cost report for a scheme")
    k.add_argument("--data", required=True, help="dataset directory")
    k.add_argument("--scheme", required=True,
                   choices=[s.value for s in Scheme], help="supervision scheme")
    k.add_argument("--mask-seconds", type=float, default=79.0,
                   help="labeling seconds per dense mask")
    k.add_argument("--box-seconds", type=float, default=7.0,
                   help="labeling seconds per bounding box")
    k.set_defaults(func=cmd_cost)

    t = sub.add_parser("train", formatter_class=fmt, help="train a model")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", default=None,
                   help="JSON file mirroring TrainConfig fields")
    t.add_argument("--out", required=True, help="run directory (logs, checkpoints)")
    t.add_argument("--scheme", default=None,
                   choices=[s.value for s in Scheme], help="override config scheme")
    t.add_argument("--lgcfs", default=None,
                   choices=[m.value for m in LgcfsMode],
                   help="override cross-frame loss mode")
    t.add_argument("--blcl", default=None, metavar="TOGGLES",
                   help="override contrast toggles: comma list over lv,cc,pseudo, "
                        "or 'none'")
    t.add_argument("--epochs", type=int, default=None, help="override config epochs")
    t.add_argument("--lr", type=float, default=None, help="override learning rate")
    t.add_argument("--resume", action="store_true",
                   help="resume from out/checkpoint_last.json if present")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", formatter_class=fmt,
                       help="evaluate a checkpoint, write an EvalReport JSON")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--ckpt", required=True, help="checkpoint file")
    e.add_argument("--out", required=True, help="path for report.json")
    e.add_argument("--split", default="all", choices=["train", "val", "all"],
                   help="which split of the dataset to score")
    e.add_argument("--threshold", type=float, default=0.5,
                   help="probability binarization threshold")
    e.add_argument("--dump-masks", default=None, metavar="DIR",
                   help="also write predicted masks as PNGs for inspection")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", formatter_class=fmt,
                       help="train and evaluate a grid of configurations")
    a.add_argument("--data", required=True, help="training dataset directory")
    a.add_argument("--grid", required=True, help="JSON grid file")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--val-data", default=None,
                   help="held-out dataset directory (default: --data's val split, "
                        "or all of --data when no split exists)")
    a.set_defaults(func=cmd_ablate)

    return p


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    h, w = args.size
    manifest = generate_dataset(args.out, n_videos=args.videos, T=args.frames,
                                H=h, W=w, seed=args.seed,
                                val_fraction=args.val_fraction)
    n_val = sum(1 for r in manifest.records if r.split == "val")
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"),
                      "videos": len(manifest.records), "val_videos": n_val,
                      "frames": args.frames, "size": f"{h}x{w}",
                      "seed": args.seed}))
    return 0


def cmd_convert(args) -> int:
    manifest = load_manifest(args.data)
    scheme = Scheme.parse(args.scheme)
    overlay = {"schema_version": 1, "scheme": scheme.value, "videos": {}}
    for rec in manifest.records:
        ann = convert_annotation(rec, scheme)
        overlay["videos"][rec.id] = {"mask_frames": sorted(ann.mask_frames),
                                     "box_frames": sorted(ann.box_frames)}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "supervision.json"
    out_path.write_text(json.dumps(overlay, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
    print(json.dumps({"supervision": str(out_path), "scheme": scheme.value,
                      "videos": len(manifest.records)}))
    return 0


def cmd_cost(args) -> int:
    manifest = load_manifest(args.data)
    report = annotation_cost(manifest, Scheme.parse(args.scheme),
                             mask_seconds=args.mask_seconds,
                             box_seconds=args.box_seconds)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def _load_train_config(args) -> TrainConfig:
    cfg_dict = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        try:
            cfg_dict = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataError(f"config {path} is not valid JSON: {e}") from None
    cfg = TrainConfig.from_dict(cfg_dict)
    if args.scheme is not None:
        cfg = dataclasses.replace(cfg, scheme=Scheme.parse(args.scheme))
    if args.lgcfs is not None:
        cfg = dataclasses.replace(cfg, lgcfs_mode=LgcfsMode.parse(args.lgcfs))
    if args.blcl is not None:
        toggles = _parse_blcl_toggles(args.blcl)
        cfg = dataclasses.replace(cfg, blcl=dataclasses.replace(cfg.blcl, **toggles))
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    if args.lr is not None:
        cfg = dataclasses.replace(cfg, lr=args.lr)
    env_seed = os.environ.get("RVOS_SEED")
    if env_seed is not None:
        try:
            cfg = dataclasses.replace(cfg, seed=int(env_seed))
        except ValueError:
            raise DataError(f"RVOS_SEED must be an integer, got '{env_seed}'") from None
    return cfg


def cmd_train(args) -> int:
    manifest = load_manifest(args.data)
    cfg = _load_train_config(args)
    ckpt = fit(_train_split(manifest), cfg, args.out, resume=args.resume)
    print(json.dumps({"checkpoint": str(ckpt),
                      "log": str(Path(args.out) / "train_log.jsonl"),
                      "seed": cfg.seed}))
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.data)
    if args.split != "all":
        manifest = manifest.subset(args.split)
    preds = predict(args.ckpt, manifest)
    report = evaluate(preds, manifest, binarize_threshold=args.threshold)
    out_path = Path(args.out)
    if out_path.parent != Path(""):
        out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(report.to_json(), encoding="utf-8")
    if args.dump_masks is not None:
        dump_root = Path(args.dump_masks)
        for rec in manifest.records:
            vid_dir = dump_root / rec.id
            vid_dir.mkdir(parents=True, exist_ok=True)
            binary = (preds[rec.id] > args.threshold).astype(np.uint8) * 255
            for t in range(rec.T):
                Image.fromarray(binary[t], mode="L").save(vid_dir / f"{t:03d}.png")
    print(json.dumps({"J_mean": report.J_mean, "F_mean": report.F_mean,
                      "JF_mean": report.JF_mean, "map_50_95": report.map_50_95,
                      "report": str(out_path)}))
    return 0


def _cell_name(scheme: str, mode: str, blcl: str, d_th: float) -> str:
    blcl_tag = blcl.replace(",", "+") if blcl else "base"
    return f"{scheme}__{mode}__{blcl_tag}__dth{d_th:g}".replace(".", "p")


def cmd_ablate(args) -> int:
    manifest = load_manifest(args.data)
    grid_path = Path(args.grid)
    if not grid_path.exists():
        raise DataError(f"grid file not found: {grid_path}")
    try:
        grid = json.loads(grid_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"grid {grid_path} is not valid JSON: {e}") from None

    base = TrainConfig.from_dict(grid.get("base", {}))
    env_seed = os.environ.get("RVOS_SEED")
    if env_seed is not None:
        try:
            base = dataclasses.replace(base, seed=int(env_seed))
        except ValueError:
            raise DataError(f"RVOS_SEED must be an integer, got '{env_seed}'") from None

    schemes = grid.get("schemes") or [base.scheme.value]
    modes = grid.get("lgcfs_modes") or [base.lgcfs_mode.value]
    blcl_sets = grid.get("blcl") or [None]
    d_ths = grid.get("d_th") or [base.blcl.d_th]

    train_manifest = _train_split(manifest)
    if args.val_data is not None:
        val_manifest = load_manifest(args.val_data)
    else:
        try:
            val_manifest = manifest.subset("val")
        except DataError:
            val_manifest = manifest

    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    cells = []
    for scheme, mode, blcl, d_th in itertools.product(schemes, modes, blcl_sets, d_ths):
        blcl_cfg = dataclasses.replace(base.blcl, d_th=float(d_th))
        if blcl is not None:
            blcl_cfg = dataclasses.replace(blcl_cfg, **_parse_blcl_toggles(blcl))
        cfg = dataclasses.replace(base, scheme=Scheme.parse(scheme),
                                  lgcfs_mode=LgcfsMode.parse(mode), blcl=blcl_cfg)
        name = _cell_name(scheme, mode, blcl or "", float(d_th))
        cell_dir = out_root / name
        ckpt = fit(train_manifest, cfg, cell_dir)
        report = evaluate(predict(ckpt, val_manifest), val_manifest)
        (cell_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
        cells.append({"name": name, "scheme": scheme, "lgcfs_mode": mode,
                      "blcl": blcl, "d_th": d_th,
                      "J_mean": report.J_mean, "F_mean": report.F_mean,
                      "JF_mean": report.JF_mean, "map_50_95": report.map_50_95})

    (out_root / "summary.json").write_text(
        json.dumps({"cells": cells}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")

    header = f"{'cell':<48} {'J':>7} {'F':>7} {'J&F':>7} {'mAP':>7}"
    print(header)
    print("-" * len(header))
    for c in cells:
        print(f"{c['name']:<48} {c['J_mean']:>7.4f} {c['F_mean']:>7.4f} "
              f"{c['JF_mean']:>7.4f} {c['map_50_95']:>7.4f}")
    return 0


# ---------------------------------------------------------------------------

def _print_error(kind: str, exc: Exception) -> None:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        return args.func(args) or 0
    except DataError as e:
        _print_error("data", e)
        return 3
    except NumericError as e:
        _print_error("numeric", e)
        return 4
    except WeakRvosError as e:
        _print_error("error", e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
