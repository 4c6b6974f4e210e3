"""Ablation variants: where fusion happens, which boxes are used, and how
instance features are blended in.

The two mask blends replace full-image features by instance features inside
a binary region (the box, or the ground-truth instance mask). Where regions
overlap the highest instance index wins.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from .fusion import FusionBundle
from .training import BoxSelection

PLACEMENTS = ("none", "encoder_only", "decoder_only", "both")
BLEND_MODES = ("learned_fusion", "box_mask", "gt_mask")


def fuse_layer_box_mask(bundle: FusionBundle) -> torch.Tensor:
    bundle.check()
    fused = bundle.full_feature
    for inst in bundle.instances:
        fused = torch.where(inst.mask, inst.feature, fused)
    return fused


def fuse_layer_gt_mask(bundle: FusionBundle, masks: Sequence[torch.Tensor]) -> torch.Tensor:
    """Like :func:`fuse_layer_box_mask` but gated by per-instance (1, h, w) masks."""
    bundle.check()
    if len(masks) != len(bundle.instances):
        raise ValueError(f"{len(masks)} masks for {len(bundle.instances)} instances")
    fused = bundle.full_feature
    for inst, m in zip(bundle.instances, masks):
        m = torch.as_tensor(m, dtype=torch.bool).reshape(inst.mask.shape)
        fused = torch.where(m & inst.mask, inst.feature, fused)
    return fused


def downsample_mask(mask, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor resize of an (H, W) binary mask to a (1, h, w) bool map."""
    m = torch.as_tensor(mask).to(torch.float32)[None, None]
    return F.interpolate(m, size=size, mode="nearest")[0] > 0.5


@dataclass
class AblationSpec:
    fusion_placement: str = "both"
    box_strategy: BoxSelection = field(default_factory=BoxSelection)
    blend_mode: str = "learned_fusion"

    def __post_init__(self):
        if isinstance(self.box_strategy, dict):
            self.box_strategy = BoxSelection(**self.box_strategy)
        if self.fusion_placement not in PLACEMENTS:
            raise ValueError(f"unknown fusion placement {self.fusion_placement!r}")
        if self.blend_mode not in BLEND_MODES:
            raise ValueError(f"unknown blend mode {self.blend_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def placement_layers(placement: str, fusion_layers, config) -> list[int]:
    if placement == "none":
        return []
    if placement == "encoder_only":
        return [j for j in fusion_layers if j in config.encoder_layers]
    if placement == "decoder_only":
        return [j for j in fusion_layers if j in config.decoder_layers]
    return list(fusion_layers)


def run_ablation(spec: AblationSpec, model, samples, protocol: str = "full_image",
                 perceptual=None):
    """Evaluate ``model`` (an InstanceColorizer) under the variant described by ``spec``."""
    from .evaluation import evaluate_full, evaluate_instance_level

    if spec.blend_mode == "gt_mask" and any(s.masks is None for s in samples):
        raise ValueError("gt_mask blending needs instance masks for every image")
    variant = model.variant(spec)
    evaluate = evaluate_full if protocol == "full_image" else evaluate_instance_level
    report = evaluate(variant, samples, perceptual=perceptual)
    report.tag = {"ablation": spec.to_dict()}
    return report
