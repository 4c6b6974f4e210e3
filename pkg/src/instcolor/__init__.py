"""Instance-aware image colorization: dual backbones fused per layer with
learned per-pixel softmax weights."""

from .backbone import BackboneConfig, ColorizationNetwork, build_backbone, forward_with_taps
from .colorspace import LabImage, lab_to_rgb, rgb_to_lab
from .detection import BoundingBox, DetectionSet, load_annotations, select_boxes
from .fusion import FusionBundle, FusionModule, fuse_layer, fused_forward
from .training import StageConfig, smooth_l1

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "ColorizationNetwork", "build_backbone", "forward_with_taps",
    "LabImage", "lab_to_rgb", "rgb_to_lab",
    "BoundingBox", "DetectionSet", "load_annotations", "select_boxes",
    "FusionBundle", "FusionModule", "fuse_layer", "fused_forward",
    "StageConfig", "smooth_l1",
]
