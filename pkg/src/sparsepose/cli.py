"""Command line entry point: ``sparsepose {train,eval,infer,export-attn}``.

Exit codes: 0 success, 1 runtime failure, 2 bad configuration or arguments.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from datetime import datetime
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .config import RunConfig, dump_config, load_config
from .data import Sample, SceneAnnotation, SyntheticDataset, load_coco_keypoints, write_coco_results
from .errors import ConfigurationError, SparsePoseError
from .evaluation import evaluate_ap, ground_truth_as_predictions
from .pipeline import (
    PoseModel, Trainer, check_compatible, collate, fit, load_checkpoint, predict_dataset,
    read_checkpoint, save_checkpoint, seed_everything, select_poses,
)
from .render import attention_overlay, draw_poses

log = logging.getLogger("sparsepose")

CHECKPOINT_DIR = "checkpoints"
TRAIN_LOG = "train_log.jsonl"


def _run_dir(out: Optional[str], tag: str) -> Path:
    if out:
        return Path(out)
    return Path("runs") / f"{datetime.now():%Y%m%d-%H%M%S}-{tag}"


def _claim(paths, overwrite: bool) -> None:
    """Refuse to clobber existing outputs unless ``overwrite``."""
    existing = [p for p in paths if p.exists()]
    if existing and not overwrite:
        raise ConfigurationError(f"{existing[0]} exists; pass --overwrite to replace it")
    for p in existing:
        shutil.rmtree(p) if p.is_dir() else p.unlink()


def _checkpoint_path(run_dir: Path, step: int) -> Path:
    return run_dir / CHECKPOINT_DIR / f"step_{step:07d}.ckpt"


def latest_checkpoint(run_dir) -> Optional[Path]:
    ckpts = sorted((Path(run_dir) / CHECKPOINT_DIR).glob("step_*.ckpt"))
    return ckpts[-1] if ckpts else None


def _build_config(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _dataset(cfg: RunConfig, annotations=None, image_root=None):
    annotations = annotations or (cfg.data.annotations if cfg.data.source == "coco" else None)
    if annotations is not None:
        root = image_root or cfg.data.image_root or str(Path(annotations).parent)
        return load_coco_keypoints(annotations, root)
    return SyntheticDataset(cfg.data.synthetic)


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    if args.resume:
        run_dir = Path(args.resume)
        ckpt_path = latest_checkpoint(run_dir)
        if ckpt_path is None:
            raise ConfigurationError(f"no checkpoint to resume under {run_dir / CHECKPOINT_DIR}")
        ckpt = read_checkpoint(ckpt_path)
        cfg = ckpt.config
        if args.config or args.set:
            requested = _build_config(args)
            check_compatible(ckpt.config.model, requested.model)
            cfg = requested
    else:
        cfg = _build_config(args)
        run_dir = _run_dir(args.out, cfg.tag)
        _claim([run_dir / CHECKPOINT_DIR, run_dir / TRAIN_LOG, run_dir / "config.yaml"], args.overwrite)
        ckpt = None
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CHECKPOINT_DIR).mkdir(exist_ok=True)
    (run_dir / "config.yaml").write_text(dump_config(cfg))

    seed_everything(cfg.seed, cfg.train.deterministic)
    model = PoseModel(cfg.model)
    trainer = Trainer(model, cfg)
    if ckpt is not None:
        model.load_state_dict(ckpt.model_state)
        if ckpt.optimizer_state is not None:
            trainer.optimizer.load_state_dict(ckpt.optimizer_state)
        trainer.step = ckpt.step
        log.info("resuming from %s at step %d", ckpt_path, ckpt.step)

    dataset = _dataset(cfg)
    log_file = open(run_dir / TRAIN_LOG, "a")
    start = time.time()

    def on_step(record):
        if record["step"] == 1 or record["step"] % cfg.train.log_every == 0 or record["step"] == cfg.train.steps:
            record = dict(record, elapsed=round(time.time() - start, 3))
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
            log.info("step %d loss %.4f", record["step"], record["total"])

    def on_checkpoint(step):
        save_checkpoint(_checkpoint_path(run_dir, step), model, cfg, trainer.optimizer, step)

    try:
        fit(trainer, dataset, cfg.train.steps, on_step, on_checkpoint, cfg.train.checkpoint_every)
    finally:
        log_file.close()
    final = _checkpoint_path(run_dir, trainer.step)
    if not final.exists():
        on_checkpoint(trainer.step)
    print(json.dumps({"run_dir": str(run_dir), "step": trainer.step, "checkpoint": str(final)}))
    return 0


# ---------------------------------------------------------------------------
# eval / infer / export

def _load_model(args):
    """Model from ``--checkpoint``; ``--config``/``--set`` must agree with its architecture."""
    ckpt = read_checkpoint(args.checkpoint)
    cfg = ckpt.config
    if args.config or args.set:
        cfg = _build_config(args)
        check_compatible(ckpt.config.model, cfg.model)
    model, _ = load_checkpoint(args.checkpoint)
    return model, cfg


def cmd_eval(args) -> int:
    if args.replay_gt:
        cfg = _build_config(args) if args.checkpoint is None else read_checkpoint(args.checkpoint).config
        model = None
    else:
        if args.checkpoint is None:
            raise ConfigurationError("eval needs --checkpoint (or --replay-gt)")
        model, cfg = _load_model(args)
    dataset = _dataset(cfg, args.annotations, args.image_root)
    annotations = [dataset[i].annotation for i in range(len(dataset))]
    if model is None:
        predictions = ground_truth_as_predictions(annotations)
    else:
        # AP ranks every query up to top_k; the score threshold only trims deployment output
        predictions = predict_dataset(model, dataset, 0.0, cfg.infer.top_k)
    metrics = evaluate_ap(predictions, annotations, max_dets=cfg.infer.top_k)
    out_dir = _run_dir(args.out, "eval")
    target = out_dir / "metrics.json"
    _claim([target], args.overwrite)
    out_dir.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(metrics, indent=2))
    print(json.dumps(metrics))
    return 0


def _read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def _predict_image(model, image: np.ndarray):
    images, sizes, _ = collate([Sample(image, SceneAnnotation.empty())])
    model.eval()
    with torch.no_grad():
        return model(images, sizes)[-1]


def cmd_infer(args) -> int:
    model, cfg = _load_model(args)
    threshold = cfg.infer.score_threshold if args.threshold is None else args.threshold
    out_dir = _run_dir(args.out, "infer")
    results_path = out_dir / "results.json"
    render_dir = out_dir / "renders"
    _claim([results_path] + ([render_dir] if args.render else []), args.overwrite)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.render:
        render_dir.mkdir()
    all_poses, ids, failures = [], [], 0
    for path in args.images:
        path = Path(path)
        try:
            image = _read_image(path)
            poses = select_poses(_predict_image(model, image), threshold, cfg.infer.top_k)[0]
        except (OSError, SparsePoseError) as exc:
            failures += 1
            print(f"error: {path}: {exc}", file=sys.stderr)
            continue
        all_poses.append(poses)
        ids.append(path.stem)
        if args.render:
            draw_poses(image, poses).save(render_dir / f"{path.stem}.png")
    write_coco_results(all_poses, ids, results_path)
    print(json.dumps({"results": str(results_path), "images": len(ids), "poses": sum(map(len, all_poses))}))
    return 1 if failures and failures == len(args.images) else 0


def cmd_export_attention(args) -> int:
    model, cfg = _load_model(args)
    threshold = cfg.infer.score_threshold if args.threshold is None else args.threshold
    image = _read_image(args.image)
    pred = _predict_image(model, image)
    poses = select_poses(pred, threshold, cfg.infer.top_k)[0]
    if not 0 <= args.instance < len(poses):
        raise ConfigurationError(f"instance index {args.instance} out of range: {len(poses)} poses retained")
    pose = poses[args.instance]
    maps = pred.attention_maps[0, pose.query].double().numpy()
    sums = maps.reshape(len(maps), -1).sum(-1)
    if np.abs(sums - 1).max() > 1e-5:
        raise SparsePoseError(f"attention maps do not sum to one: {sums}")
    out_dir = _run_dir(args.out, "attn")
    targets = [out_dir / f"part_{m:02d}{ext}" for m in range(len(maps)) for ext in (".npy", ".png")]
    _claim(targets, args.overwrite)
    out_dir.mkdir(parents=True, exist_ok=True)
    for m, amap in enumerate(maps):
        np.save(out_dir / f"part_{m:02d}.npy", amap)
        attention_overlay(image, pose.box, amap).save(out_dir / f"part_{m:02d}.png")
    print(json.dumps({"out": str(out_dir), "parts": len(maps), "query": pose.query}))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsepose", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint_required=False):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. model.scheme=a (repeatable)")
        p.add_argument("--checkpoint", required=checkpoint_required)
        p.add_argument("--out", help="output directory (default: runs/<timestamp>-<tag>)")
        p.add_argument("--seed", type=int)
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--resume", metavar="RUN_DIR", help="continue from the latest checkpoint in RUN_DIR")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="OKS AP/AR of a checkpoint")
    common(p)
    p.add_argument("--annotations", help="COCO keypoint JSON (default: dataset from the config)")
    p.add_argument("--image-root")
    p.add_argument("--replay-gt", action="store_true", help="debug: score ground truth as predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict poses for images")
    common(p, checkpoint_required=True)
    p.add_argument("images", nargs="+")
    p.add_argument("--threshold", type=float)
    p.add_argument("--render", action="store_true", help="also write skeleton overlays")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export-attn", help="dump final-stage part attention maps for one detection")
    common(p, checkpoint_required=True)
    p.add_argument("image")
    p.add_argument("--instance", type=int, required=True, help="rank among retained detections")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_export_attention)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SparsePoseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
