"""Command-line interface: ``instcolor {gen-fixture,train,colorize,evaluate,ablate}``.

Failures exit nonzero after printing one JSON line ``{"error": ..., "message": ...}``
to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .ablation import AblationSpec, run_ablation
from .backbone import INSTANCE, build_backbone
from .checkpoint import CheckpointError, load_archive, read_manifest, save_archive
from .colorspace import denormalize_ab, lab_to_rgb, merge_channels, normalize_l, rgb_to_lab
from .config import RunConfig, load_config, render_config
from .data import load_dataset, read_rgb, write_fixture
from .detection import AnnotationDetector, load_annotations, resize_bilinear, scale_box
from .evaluation import evaluate_full, evaluate_instance_level
from .fusion import FusionModule
from .pipeline import InstanceColorizer
from .training import (STAGES, build_instance_dataset, fusion_config_hash,
                       train_stage_fusion, train_stage_full, train_stage_instance)

log = logging.getLogger("instcolor")

STAGE_ARCHIVES = {"full": ("full",), "instance": ("instance",),
                  "fusion": ("full", "instance", "heads")}


class UsageError(RuntimeError):
    pass


def _models(cfg: RunConfig):
    full = build_backbone(cfg.backbone)
    inst = build_backbone(cfg.backbone, role=INSTANCE)
    fusion = FusionModule(cfg.backbone, hidden=cfg.fusion.hidden,
                          max_instances=cfg.fusion.max_instances,
                          zero_logit_padding=cfg.fusion.zero_logit_padding)
    return full, inst, fusion


def _hashes(cfg: RunConfig, fusion: FusionModule) -> dict:
    h = cfg.backbone.config_hash()
    return {"full": h, "instance": h, "heads": fusion_config_hash(fusion)}


def _final_dir(cfg: RunConfig, stage: str) -> Path:
    return cfg.checkpoint_dir / stage / "final"


def _save_stage(cfg, stage, nets: dict, hashes: dict):
    target = _final_dir(cfg, stage)
    if target.exists():
        shutil.rmtree(target)
    for name in STAGE_ARCHIVES[stage]:
        save_archive(nets[name], target / name, hashes[name],
                     meta={"stage": stage, "stage_hash": cfg.stage_hash(stage)})
    return target


def _stage_done(cfg, stage) -> bool:
    """True when a final checkpoint for ``stage`` matches the current config."""
    target = _final_dir(cfg, stage)
    if not target.exists():
        return False
    manifests = [read_manifest(target / name) for name in STAGE_ARCHIVES[stage]]
    return all(m["meta"].get("stage_hash") == cfg.stage_hash(stage) for m in manifests)


def _load_stage(cfg, stage, nets: dict, hashes: dict):
    target = _final_dir(cfg, stage)
    if not target.exists():
        raise CheckpointError(f"missing checkpoint for stage {stage!r} at {target}")
    for name in STAGE_ARCHIVES[stage]:
        load_archive(nets[name], target / name, hashes[name])


def _datasets(cfg: RunConfig, masks: bool = False):
    for p in (cfg.data.annotations, cfg.data.val_annotations):
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(f"annotation file not found: {p}")
    train = load_dataset(cfg.data.annotations, cfg.data.resolution, masks)
    val = (load_dataset(cfg.data.val_annotations, cfg.data.resolution, masks)
           if cfg.data.val_annotations else train)
    return train, val


def cmd_train(args) -> int:
    cfg = load_config(args.config, seed=args.seed, output_dir=args.output_dir)
    train, _ = _datasets(cfg)
    full, inst, fusion = _models(cfg)
    nets = {"full": full, "instance": inst, "heads": fusion}
    hashes = _hashes(cfg, fusion)
    wanted = STAGES if args.stage == "all" else (args.stage,)
    logs = cfg.output_dir / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    boxes = cfg.ablation.box_strategy

    for stage in STAGES:
        if stage not in wanted:
            if STAGES.index(stage) < STAGES.index(wanted[0]):
                _load_stage(cfg, stage, nets, hashes)
            continue
        if args.resume and _stage_done(cfg, stage):
            _load_stage(cfg, stage, nets, hashes)
            log.info("stage %s: resumed from %s", stage, _final_dir(cfg, stage))
            continue
        stage_cfg = cfg.stages[stage]
        ckpt = cfg.checkpoint_dir / stage
        if stage == "full":
            _, record = train_stage_full(stage_cfg, train, full, checkpoint_dir=ckpt)
        elif stage == "instance":
            data = build_instance_dataset(train, cfg.instance_resolution, boxes.strategy,
                                          boxes.k, boxes.threshold, boxes.seed)
            trained, record = train_stage_instance(stage_cfg, data, full, checkpoint_dir=ckpt)
            inst.load_state_dict(trained.state_dict())
        else:
            _, record = train_stage_fusion(stage_cfg, train, full, inst, fusion, boxes,
                                           cfg.instance_resolution, checkpoint_dir=ckpt)
        final = _save_stage(cfg, stage, nets, hashes)
        record.checkpoints.append(str(final))
        record.write(logs / "train.jsonl")
        log.info("stage %s done: final loss %s", stage,
                 record.epoch_losses[-1] if record.epoch_losses else "n/a")
    return 0


def _trained_colorizer(cfg: RunConfig, spec: AblationSpec | None = None) -> InstanceColorizer:
    full, inst, fusion = _models(cfg)
    _load_stage(cfg, "fusion", {"full": full, "instance": inst, "heads": fusion},
                _hashes(cfg, fusion))
    return InstanceColorizer(full, inst, fusion, instance_resolution=cfg.instance_resolution,
                             spec=spec or AblationSpec(box_strategy=cfg.ablation.box_strategy))


def _heatmap(weights: np.ndarray, size: tuple[int, int]) -> Image.Image:
    img = Image.fromarray(np.round(np.clip(weights, 0, 1) * 255).astype(np.uint8))
    return img.resize((size[1], size[0]), Image.NEAREST)


def colorize_image(model: InstanceColorizer, rgb: np.ndarray, boxes, record=None) -> np.ndarray:
    """Colorize one raster at any size; returns 8-bit RGB of the same size."""
    lab = rgb_to_lab(rgb)
    H, W = lab.L.shape
    res = model.full_net.config.base_resolution
    L = torch.from_numpy(normalize_l(lab.L)).float()[None]
    if (H, W) != (res, res):
        L = resize_bilinear(L, (res, res))
        boxes = [scale_box(b, (H, W), (res, res)) for b in boxes]
    with torch.no_grad():
        ab = model.colorize(L, boxes, record=record)[0]
    if (H, W) != (res, res):
        ab = resize_bilinear(ab, (H, W))
    ab = denormalize_ab(ab.double().numpy())
    return lab_to_rgb(merge_channels(lab.L, ab), as_uint8=True)


def cmd_colorize(args) -> int:
    cfg = load_config(args.config, seed=args.seed, output_dir=args.output_dir)
    model = _trained_colorizer(cfg)
    ann = args.annotations or cfg.data.annotations
    store = load_annotations(ann) if ann and Path(ann).is_file() else None
    out = cfg.output_dir / "colorized"
    out.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        path = Path(path)
        try:
            rgb = read_rgb(path)
        except (OSError, ValueError) as exc:
            raise UsageError(f"unreadable image {path}: {exc}") from exc
        L = rgb_to_lab(rgb).L
        dets = AnnotationDetector(store).detect(L, path.stem) if store else None
        selected = model.boxes.select(dets) if dets else []
        record = {} if args.dump_weights else None
        result = colorize_image(model, rgb, selected, record)
        Image.fromarray(result).save(out / f"{path.stem}.png")
        if args.dump_weights:
            _dump_weights(model, record, len(selected), out / "weights", path.stem, L.shape)
        log.info("%s: %d instances -> %s", path.name, len(selected), out / f"{path.stem}.png")
    return 0


def _dump_weights(model, record, n_instances, out_dir, stem, size):
    out_dir.mkdir(parents=True, exist_ok=True)
    res = model.full_net.config.base_resolution
    layers = sorted(record) if record else model.fusion.layers
    for j in layers:
        if record:
            w = record[j].numpy()
        else:
            shape = model.full_net.config.layer_shapes(res)[j][1:]
            w = np.ones((1,) + shape)
        for i in range(w.shape[0]):
            name = "full" if i == 0 else f"inst{i - 1}"
            _heatmap(w[i], size).save(out_dir / f"{stem}_layer{j:02d}_{name}.png")


class _GroundTruth:
    def __call__(self, sample, index=0):
        return sample.ab[None]


def _write_reports(reports, out_dir, prefix=""):
    for r in reports:
        r.write(out_dir, prefix + r.protocol)
        log.info("%s%s: %d rows, means %s", prefix, r.protocol, r.count, r.means())


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, seed=args.seed, output_dir=args.output_dir)
    _, val = _datasets(cfg)
    model = _GroundTruth() if args.oracle else _trained_colorizer(cfg)
    reports = [evaluate_full(model, val), evaluate_instance_level(model, val)]
    _write_reports(reports, cfg.output_dir / "reports")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, seed=args.seed, output_dir=args.output_dir)
    spec = cfg.ablation
    _, val = _datasets(cfg, masks=cfg.data.masks or spec.blend_mode == "gt_mask")
    model = _trained_colorizer(cfg)
    reports = [run_ablation(spec, model, val, protocol=p)
               for p in ("full_image", "instance_level")]
    b = spec.box_strategy
    prefix = f"ablation_{spec.fusion_placement}_{b.strategy}{b.k}_{spec.blend_mode}_"
    _write_reports(reports, cfg.output_dir / "reports", prefix)
    return 0


def cmd_gen_fixture(args) -> int:
    out = Path(args.output_dir or "fixture")
    write_fixture(out, n=args.n, size=args.size, seed=args.seed)
    val_rel = None
    if args.val:
        write_fixture(out / "val", n=args.val, size=args.size, seed=args.seed + 10_000)
        val_rel = "val/annotations.json"
    (out / "config.yaml").write_text(
        render_config("annotations.json", val_rel, "run", seed=args.seed, resolution=args.size))
    log.info("wrote %d images (+%d validation) and config.yaml to %s", args.n, args.val, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="instcolor", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="run configuration (YAML)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output-dir", default=None)

    p = sub.add_parser("train", help="run the three training stages")
    common(p)
    p.add_argument("--stage", choices=("all",) + STAGES, default="all")
    p.add_argument("--resume", action="store_true",
                   help="skip stages whose final checkpoint matches the config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("colorize", help="colorize images with trained checkpoints")
    common(p)
    p.add_argument("images", nargs="+")
    p.add_argument("--annotations", default=None, help="boxes for the images (JSON)")
    p.add_argument("--dump-weights", action="store_true",
                   help="also write per-layer blending weight heatmaps")
    p.set_defaults(func=cmd_colorize)

    p = sub.add_parser("evaluate", help="full-image and instance-level metrics")
    common(p)
    p.add_argument("--oracle", action="store_true",
                   help="use ground-truth color as the prediction (protocol check)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="evaluate the configured ablation variant")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-fixture", help="write the synthetic toy dataset")
    common(p, config=False)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--val", type=int, default=0, help="number of validation images")
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_gen_fixture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "gen-fixture" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (CheckpointError, FileNotFoundError, ValueError, UsageError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
