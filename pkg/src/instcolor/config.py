"""Run configuration: one YAML file with a section per component."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .ablation import AblationSpec
from .backbone import BackboneConfig
from .training import ORIGINAL_STAGE_DEFAULTS, STAGES, BoxSelection, StageConfig

TEMPLATE = """\
# instcolor run configuration. Relative paths resolve against this file.
seed: {seed}
output_dir: {output_dir}

data:
  annotations: {annotations}
  val_annotations: {val_annotations}
  resolution: {resolution}        # images are resized to resolution x resolution
  masks: false                    # load instance masks (needed for blend_mode gt_mask)

backbone:
  # 13 layers of 64,128,256,512,512,512,512,256,256,128,128,128,128 channels
  # at 256x256 reproduce the original model size; toy runs use fewer layers.
  layer_channels: {layer_channels}
  base_resolution: {resolution}
  scale_profile: null             # per-layer downsample factors; null = default
  fusion_layers: null             # null = fuse at every layer
  paper_faithful: false
  instance_resolution: {resolution}   # side of the resized instance crops (256 originally)

fusion:
  hidden: 16                      # width of the 3-conv weight heads
  max_instances: 8                # top 8 boxes by confidence
  zero_logit_padding: false       # true = literal zero logits outside boxes

training:
  # Original schedule: full 2 epochs @ 1e-5, instance 5 epochs @ 5e-5,
  # fusion 2 epochs @ 2e-5; Adam with beta1 0.99, beta2 0.999.
  # unfreeze_backbones: true also finetunes both backbones in the fusion stage.
  full:     {{epochs: {e_full}, learning_rate: {lr_full}, beta1: 0.99, beta2: 0.999, batch_size: 4}}
  instance: {{epochs: {e_inst}, learning_rate: {lr_inst}, beta1: 0.99, beta2: 0.999, batch_size: 4}}
  fusion:   {{epochs: {e_fus}, learning_rate: {lr_fus}, beta1: 0.99, beta2: 0.999, batch_size: 4,
             unfreeze_backbones: false}}

ablation:
  fusion_placement: both          # none | encoder_only | decoder_only | both
  box_strategy: {{strategy: top_k, k: 8, threshold: 0.5, seed: {seed}}}
  blend_mode: learned_fusion      # learned_fusion | box_mask | gt_mask
"""

TOY_CHANNELS = [16, 32, 32, 32, 16, 16]
TOY_SCHEDULE = {"full": (20, 2e-3), "instance": (20, 2e-3), "fusion": (10, 2e-3)}


def render_config(annotations="annotations.json", val_annotations=None, output_dir="run",
                  seed: int = 0, resolution: int = 64, layer_channels=None,
                  schedule: dict | None = None) -> str:
    schedule = schedule or TOY_SCHEDULE
    return TEMPLATE.format(
        seed=seed, output_dir=output_dir, annotations=annotations,
        val_annotations="null" if val_annotations is None else val_annotations,
        resolution=resolution, layer_channels=list(layer_channels or TOY_CHANNELS),
        e_full=schedule["full"][0], lr_full=schedule["full"][1],
        e_inst=schedule["instance"][0], lr_inst=schedule["instance"][1],
        e_fus=schedule["fusion"][0], lr_fus=schedule["fusion"][1])


@dataclass
class DataConfig:
    annotations: Path
    val_annotations: Path | None = None
    resolution: int = 64
    masks: bool = False


@dataclass
class FusionConfig:
    hidden: int = 16
    max_instances: int = 8
    zero_logit_padding: bool = False


@dataclass
class RunConfig:
    data: DataConfig
    backbone: BackboneConfig
    stages: dict[str, StageConfig]
    ablation: AblationSpec = field(default_factory=AblationSpec)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    instance_resolution: int = 64
    output_dir: Path = Path("run")
    seed: int = 0
    source: Path | None = None

    @property
    def checkpoint_dir(self) -> Path:
        return self.output_dir / "checkpoints"

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with ``seed`` pushed into every stochastic component."""
        return RunConfig(
            data=self.data,
            backbone=BackboneConfig(**{**asdict(self.backbone), "seed": seed}),
            stages={k: StageConfig(**{**asdict(v), "seed": seed}) for k, v in self.stages.items()},
            ablation=AblationSpec(self.ablation.fusion_placement,
                                  BoxSelection(**{**asdict(self.ablation.box_strategy),
                                                  "seed": seed}),
                                  self.ablation.blend_mode),
            fusion=self.fusion, instance_resolution=self.instance_resolution,
            output_dir=self.output_dir, seed=seed, source=self.source)

    def stage_hash(self, stage: str) -> str:
        """Hash of everything that determines the result of ``stage`` and its predecessors."""
        upto = STAGES[:STAGES.index(stage) + 1]
        blob = {"backbone": asdict(self.backbone), "fusion": asdict(self.fusion),
                "instance_resolution": self.instance_resolution,
                "box_strategy": asdict(self.ablation.box_strategy),
                "stages": {s: asdict(self.stages[s]) for s in upto}}
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


def _resolve(base: Path, p) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else base / p


def load_config(path, seed: int | None = None, output_dir=None) -> RunConfig:
    path = Path(path)
    doc = yaml.safe_load(path.read_text()) or {}
    base = path.parent
    data = dict(doc.get("data") or {})
    if "annotations" not in data:
        raise ValueError(f"{path}: data.annotations is required")
    data_cfg = DataConfig(annotations=_resolve(base, data["annotations"]),
                          val_annotations=_resolve(base, data.get("val_annotations")),
                          resolution=int(data.get("resolution", 64)),
                          masks=bool(data.get("masks", False)))
    bb = dict(doc.get("backbone") or {})
    instance_resolution = int(bb.pop("instance_resolution", bb.get("base_resolution", 64)))
    backbone = BackboneConfig(**bb)
    train = doc.get("training") or {}
    stages = {}
    for name in STAGES:
        section = {**ORIGINAL_STAGE_DEFAULTS[name], **(train.get(name) or {})}
        stages[name] = StageConfig(stage=name, **section)
    cfg = RunConfig(
        data=data_cfg, backbone=backbone, stages=stages,
        ablation=AblationSpec(**(doc.get("ablation") or {})),
        fusion=FusionConfig(**(doc.get("fusion") or {})),
        instance_resolution=instance_resolution,
        output_dir=_resolve(base, output_dir or doc.get("output_dir", "run")),
        seed=int(doc.get("seed", 0)), source=path)
    if output_dir is not None:
        cfg.output_dir = Path(output_dir)
    return cfg.with_seed(cfg.seed if seed is None else seed)
