"""Instance-to-full-image feature fusion.

At every fusion layer, a small conv head scores the full-image feature and
each instance feature per pixel. Instance features and their scores are
resized into their box on the full-image grid, then a per-pixel softmax
over the branches that cover each pixel gives the blending weights, and the
fused feature is the weighted sum of the branch features.

Pixels outside an instance box exclude that instance from the softmax
(i.e. its logit counts as -inf there). ``zero_logit_padding=True`` instead
keeps a literal zero logit for out-of-box pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig, ColorizationNetwork, ConfigError, as_batch
from .detection import BoundingBox, resize_bilinear, scale_box

DEFAULT_MAX_INSTANCES = 8


class WeightHead(nn.Module):
    """Three 3x3 convolutions mapping a C-channel feature to a 1-channel logit map."""

    def __init__(self, in_channels: int, hidden: int = 16, zero_init: bool = False):
        super().__init__()
        self.in_channels = in_channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, 1, 3, padding=1),
        )
        if zero_init:
            for p in self.parameters():
                nn.init.zeros_(p)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        squeeze = feat.dim() == 3
        x = feat[None] if squeeze else feat
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"weight head expects {self.in_channels} channels, got {x.shape[1]}")
        y = self.net(x)
        return y[0] if squeeze else y


def predict_weight_logits(head: WeightHead, feat: torch.Tensor) -> torch.Tensor:
    return head(feat)


@dataclass
class RetargetedInstance:
    feature: torch.Tensor  # (C, h, w), zero outside the box
    logits: torch.Tensor  # (1, h, w), zero outside the box
    mask: torch.Tensor  # (1, h, w) bool, True inside the box


@dataclass
class FusionBundle:
    full_feature: torch.Tensor  # (C, h, w)
    full_logits: torch.Tensor  # (1, h, w)
    instances: list[RetargetedInstance] = field(default_factory=list)

    def check(self):
        C, h, w = self.full_feature.shape
        if tuple(self.full_logits.shape) != (1, h, w):
            raise ValueError(f"full logits {tuple(self.full_logits.shape)} vs feature {(C, h, w)}")
        for i, inst in enumerate(self.instances):
            if tuple(inst.feature.shape) != (C, h, w) or tuple(inst.logits.shape) != (1, h, w) \
                    or tuple(inst.mask.shape) != (1, h, w):
                raise ValueError(f"instance {i} does not match the full-image grid {(C, h, w)}")


def retarget_instance(feat: torch.Tensor, logits: torch.Tensor, layer_box: BoundingBox,
                      full_layer_size: tuple[int, int]) -> RetargetedInstance:
    """Resize an instance feature and its logits into ``layer_box`` and zero-pad the rest."""
    h, w = full_layer_size
    b = layer_box
    if b.is_degenerate():
        raise ValueError(f"degenerate layer box {b.as_list()}")
    if b.x0 < 0 or b.y0 < 0 or b.x1 > w or b.y1 > h:
        raise ValueError(f"layer box {b.as_list()} outside {w}x{h} layer")
    pad = (b.x0, w - b.x1, b.y0, h - b.y1)
    size = (b.height, b.width)
    feature = F.pad(resize_bilinear(feat, size), pad)
    logit_map = F.pad(resize_bilinear(logits, size), pad)
    mask = torch.zeros((1, h, w), dtype=torch.bool)
    mask[:, b.y0:b.y1, b.x0:b.x1] = True
    return RetargetedInstance(feature, logit_map, mask)


def blend_weights(bundle: FusionBundle, zero_logit_padding: bool = False) -> torch.Tensor:
    """Per-pixel softmax weights, shape (N + 1, h, w); index 0 is the full image."""
    bundle.check()
    logits = torch.cat([bundle.full_logits] + [i.logits for i in bundle.instances])
    if bundle.instances and not zero_logit_padding:
        mask = torch.cat([torch.ones_like(bundle.full_logits, dtype=torch.bool)]
                         + [i.mask for i in bundle.instances])
        logits = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(logits, dim=0)


def fuse_layer(bundle: FusionBundle, zero_logit_padding: bool = False) -> torch.Tensor:
    if not bundle.instances:
        bundle.check()
        return bundle.full_feature
    weights = blend_weights(bundle, zero_logit_padding)
    fused = bundle.full_feature * weights[0:1]
    for i, inst in enumerate(bundle.instances, start=1):
        fused = fused + inst.feature * weights[i:i + 1]
    return fused


Blend = Callable[[int, FusionBundle], torch.Tensor]


class FusionModule(nn.Module):
    """One (full-image, instance) pair of weight heads per fusion layer."""

    def __init__(self, config: BackboneConfig, hidden: int = 16, seed: int | None = None,
                 zero_init: bool = False, max_instances: int = DEFAULT_MAX_INSTANCES,
                 zero_logit_padding: bool = False):
        super().__init__()
        self.config = config
        self.layers = list(config.fusion_layers)
        self.hidden = hidden
        self.max_instances = max_instances
        self.zero_logit_padding = zero_logit_padding
        seed = config.seed + 1 if seed is None else seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.full_heads = nn.ModuleDict(
                {str(j): WeightHead(config.layer_channels[j], hidden, zero_init)
                 for j in self.layers})
            self.instance_heads = nn.ModuleDict(
                {str(j): WeightHead(config.layer_channels[j], hidden, zero_init)
                 for j in self.layers})

    def architecture(self) -> dict:
        return {"backbone": self.config.architecture(), "fusion_layers": self.layers,
                "hidden": self.hidden}

    def fuse(self, j: int, bundle: FusionBundle) -> torch.Tensor:
        return fuse_layer(bundle, self.zero_logit_padding)


def fused_forward(full_net: ColorizationNetwork, inst_net: ColorizationNetwork,
                  fusion: FusionModule, L, instances: Sequence[tuple[torch.Tensor, BoundingBox]],
                  layers: Sequence[int] | None = None, blend: Blend | None = None,
                  record: dict | None = None) -> torch.Tensor:
    """Colorize one image with instance fusion. Returns normalized ab, shape (1, 2, H, W).

    ``instances`` holds (instance L crop, box in full-image pixels) pairs.
    ``layers`` restricts fusion to a subset of the module's layers and
    ``blend`` swaps the blending rule. When ``record`` is a dict it receives
    the per-layer blending weights (learned blending only).
    """
    if full_net.config.architecture() != inst_net.config.architecture():
        raise ConfigError("full-image and instance networks have different architectures")
    if sorted(fusion.layers) != sorted(full_net.config.fusion_layers):
        raise ConfigError("weight heads do not cover the configured fusion layers")
    if len(instances) > fusion.max_instances:
        raise ValueError(
            f"{len(instances)} instances exceed the maximum of {fusion.max_instances}")
    x = as_batch(L).to(next(full_net.parameters()).dtype)
    if x.shape[0] != 1:
        raise ValueError("fused_forward colorizes one image at a time")
    if not instances:
        return full_net(x)[0]

    active = set(fusion.layers if layers is None else layers)
    if not active <= set(fusion.layers):
        raise ConfigError(f"layers {sorted(active)} not all covered by weight heads")
    H, W = x.shape[-2:]
    crops = torch.stack([as_batch(c)[0] for c, _ in instances]).to(x.dtype)
    _, inst_taps = inst_net(crops)
    boxes = [b for _, b in instances]

    def hook(j, feat):
        if j not in active:
            return feat
        full_feature = feat[0]
        h, w = full_feature.shape[-2:]
        full_logits = fusion.full_heads[str(j)](full_feature)
        inst_logits = fusion.instance_heads[str(j)](inst_taps[j])
        retargeted = [
            retarget_instance(inst_taps[j][i], inst_logits[i],
                              scale_box(box, (H, W), (h, w)), (h, w))
            for i, box in enumerate(boxes)
        ]
        bundle = FusionBundle(full_feature, full_logits, retargeted)
        if record is not None:
            record[j] = blend_weights(bundle, fusion.zero_logit_padding).detach()
        fused = (blend or fusion.fuse)(j, bundle)
        return fused[None]

    return full_net(x, hook=hook)[0]
