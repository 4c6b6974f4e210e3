"""The assembled colorizer: box selection, instance crops, both branches and fusion."""

from __future__ import annotations

from typing import Sequence

import torch

from .ablation import (AblationSpec, downsample_mask, fuse_layer_box_mask, fuse_layer_gt_mask,
                       placement_layers)
from .backbone import ColorizationNetwork
from .data import Sample
from .detection import BoundingBox, crop_resize_instance
from .fusion import FusionModule, fused_forward
from .training import BoxSelection


class InstanceColorizer:
    """Callable ``(sample, index) -> normalized ab (1, 2, H, W)``."""

    def __init__(self, full_net: ColorizationNetwork, inst_net: ColorizationNetwork,
                 fusion: FusionModule, boxes: BoxSelection | None = None,
                 instance_resolution: int | None = None, spec: AblationSpec | None = None):
        self.full_net = full_net
        self.inst_net = inst_net
        self.fusion = fusion
        self.spec = spec or AblationSpec(box_strategy=boxes or BoxSelection(k=fusion.max_instances))
        self.instance_resolution = instance_resolution or full_net.config.base_resolution

    @property
    def boxes(self) -> BoxSelection:
        return self.spec.box_strategy

    def variant(self, spec: AblationSpec) -> "InstanceColorizer":
        return InstanceColorizer(self.full_net, self.inst_net, self.fusion,
                                 instance_resolution=self.instance_resolution, spec=spec)

    def select(self, sample: Sample, index: int = 0) -> list[BoundingBox]:
        return self.boxes(sample, index)

    @torch.no_grad()
    def __call__(self, sample: Sample, index: int = 0, record: dict | None = None):
        boxes = self.select(sample, index)
        masks = None
        if self.spec.blend_mode == "gt_mask":
            if sample.masks is None:
                raise ValueError(f"{sample.image_id}: gt_mask blending needs instance masks")
            masks = [sample.masks[sample.boxes.index(b)] for b in boxes]
        return self.colorize(sample.L, boxes, masks, record)

    def colorize(self, L, boxes: Sequence[BoundingBox], masks=None,
                 record: dict | None = None) -> torch.Tensor:
        """Colorize a normalized (1, H, W) lightness plane given its boxes."""
        layers = placement_layers(self.spec.fusion_placement, self.fusion.layers,
                                  self.full_net.config)
        if not layers:
            boxes = []
        instances = [(crop_resize_instance(L, b, self.instance_resolution), b) for b in boxes]
        return fused_forward(self.full_net, self.inst_net, self.fusion, L, instances,
                             layers=layers, blend=self._blend(masks), record=record)

    def _blend(self, masks):
        """Blending rule for the configured mode; None selects the learned weights."""
        if self.spec.blend_mode == "box_mask":
            return lambda j, bundle: fuse_layer_box_mask(bundle)
        if self.spec.blend_mode == "gt_mask":
            def gt_blend(j, bundle):
                size = tuple(bundle.full_feature.shape[-2:])
                return fuse_layer_gt_mask(bundle, [downsample_mask(m, size) for m in masks])
            return gt_blend
        return None


def full_only(net: ColorizationNetwork):
    """Colorize callable that uses only the full-image branch."""
    @torch.no_grad()
    def colorize(sample: Sample, index: int = 0):
        return net(sample.L[None])[0]
    return colorize
