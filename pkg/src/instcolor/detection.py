"""Bounding boxes: annotation ingestion, box selection, instance crops and
layer-space box scaling.

Boxes are half-open pixel rectangles ``[x0, x1) x [y0, y1)``.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

STRATEGIES = ("top_k", "random_k", "threshold", "ground_truth")


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x0: int
    y0: int
    x1: int
    y1: int
    confidence: float = 1.0
    label: str | None = None
    mask: str | None = None

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    def clamp(self, width: int, height: int) -> "BoundingBox":
        return replace(
            self,
            x0=min(max(self.x0, 0), width),
            y0=min(max(self.y0, 0), height),
            x1=min(max(self.x1, 0), width),
            y1=min(max(self.y1, 0), height),
        )

    def is_degenerate(self) -> bool:
        return self.x1 <= self.x0 or self.y1 <= self.y0


@dataclass
class DetectionSet:
    image_id: str
    boxes: list[BoundingBox] = field(default_factory=list)

    def __len__(self):
        return len(self.boxes)


@dataclass(frozen=True)
class ImageInfo:
    id: str
    width: int
    height: int
    file: str


@dataclass
class AnnotationStore:
    """Parsed annotation file. Indexing by image id gives its DetectionSet."""

    root: Path
    images: dict[str, ImageInfo]
    detections: dict[str, DetectionSet]
    dropped: int = 0

    def __getitem__(self, image_id: str) -> DetectionSet:
        return self.detections[image_id]

    def __contains__(self, image_id) -> bool:
        return image_id in self.detections

    def __len__(self):
        return len(self.detections)

    def image_path(self, image_id: str) -> Path:
        return self.root / self.images[image_id].file


def _round_box_coords(bbox) -> list[int]:
    if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
        raise AnnotationError(f"bbox must be a list of 4 numbers, got {bbox!r}")
    try:
        return [int(math.floor(float(bbox[0]))), int(math.floor(float(bbox[1]))),
                int(math.ceil(float(bbox[2]))), int(math.ceil(float(bbox[3])))]
    except (TypeError, ValueError) as exc:
        raise AnnotationError(f"non-numeric bbox {bbox!r}") from exc


def load_annotations(path) -> AnnotationStore:
    """Read the annotation JSON file.

    Boxes are clamped to their image; boxes left with no area are dropped and
    counted in ``AnnotationStore.dropped``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"annotation file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list) \
            or not isinstance(doc.get("boxes"), list):
        raise AnnotationError(f"{path}: expected top-level 'images' and 'boxes' lists")

    images: dict[str, ImageInfo] = {}
    for entry in doc["images"]:
        try:
            info = ImageInfo(id=str(entry["id"]), width=int(entry["width"]),
                             height=int(entry["height"]), file=str(entry["file"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"{path}: malformed image entry {entry!r}") from exc
        if info.width <= 0 or info.height <= 0:
            raise AnnotationError(f"{path}: image {info.id} has non-positive size")
        images[info.id] = info

    detections = {image_id: DetectionSet(image_id) for image_id in images}
    dropped = 0
    for entry in doc["boxes"]:
        if not isinstance(entry, dict) or "image_id" not in entry or "bbox" not in entry:
            raise AnnotationError(f"{path}: malformed box entry {entry!r}")
        image_id = str(entry["image_id"])
        if image_id not in images:
            raise AnnotationError(f"{path}: box refers to unknown image {image_id!r}")
        info = images[image_id]
        x0, y0, x1, y1 = _round_box_coords(entry["bbox"])
        score = float(entry.get("score", 1.0))
        if not 0.0 <= score <= 1.0:
            raise AnnotationError(f"{path}: score {score} outside [0, 1]")
        box = BoundingBox(x0, y0, x1, y1, confidence=score, label=entry.get("label"),
                          mask=entry.get("mask")).clamp(info.width, info.height)
        if box.is_degenerate():
            dropped += 1
            continue
        detections[image_id].boxes.append(box)
    if dropped:
        log.warning("%s: dropped %d degenerate boxes after clamping", path, dropped)
    return AnnotationStore(root=path.parent, images=images, detections=detections,
                           dropped=dropped)


def save_annotations(path, images: list[ImageInfo], detections: dict[str, DetectionSet]):
    boxes = []
    for image_id, dets in detections.items():
        for b in dets.boxes:
            entry = {"image_id": image_id, "bbox": b.as_list(), "score": b.confidence}
            if b.label is not None:
                entry["label"] = b.label
            if b.mask is not None:
                entry["mask"] = b.mask
            boxes.append(entry)
    doc = {
        "images": [{"id": i.id, "width": i.width, "height": i.height, "file": i.file}
                   for i in images],
        "boxes": boxes,
    }
    Path(path).write_text(json.dumps(doc, indent=1))


class Detector(Protocol):
    """Anything that turns a lightness plane into detections."""

    def detect(self, L: np.ndarray, image_id: str) -> DetectionSet: ...


class AnnotationDetector:
    """Detector stand-in that looks boxes up in an annotation store."""

    def __init__(self, store: AnnotationStore):
        self.store = store

    def detect(self, L: np.ndarray, image_id: str) -> DetectionSet:
        if image_id not in self.store:
            return DetectionSet(image_id)
        H, W = np.shape(L)[-2:]
        info = self.store.images[image_id]
        boxes = list(self.store[image_id].boxes)
        if (info.height, info.width) != (H, W):
            boxes = [scale_box(b, (info.height, info.width), (H, W)) for b in boxes]
        return DetectionSet(image_id, boxes)


def select_boxes(dets: DetectionSet, strategy: str = "top_k", k: int = 8,
                 threshold: float = 0.5, seed: int | None = None) -> list[BoundingBox]:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown box strategy {strategy!r}")
    if k < 0:
        raise ValueError("k must be nonnegative")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    boxes = list(dets.boxes)
    if strategy == "top_k":
        # sorted() is stable, so equal scores keep list order
        return sorted(boxes, key=lambda b: -b.confidence)[:k]
    if strategy == "random_k":
        if seed is None:
            raise ValueError("random_k selection requires a seed")
        rng = random.Random(seed)
        return rng.sample(boxes, min(k, len(boxes)))
    if strategy == "threshold":
        return [b for b in boxes if b.confidence >= threshold]
    return boxes


def resize_bilinear(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of the last two dims of a (..., h, w) tensor."""
    lead = x.shape[:-2]
    flat = x.reshape((-1, 1) + tuple(x.shape[-2:]))
    out = F.interpolate(flat, size=size, mode="bilinear", align_corners=False)
    return out.reshape(lead + tuple(size))


def crop_resize_instance(plane, box: BoundingBox, target: int):
    """Crop ``box`` out of a (..., H, W) plane and resize it to target x target.

    Accepts numpy arrays or tensors and returns the same kind.
    """
    if box.is_degenerate():
        raise ValueError(f"degenerate box {box.as_list()}")
    if target < 1:
        raise ValueError("target side must be >= 1")
    is_numpy = not isinstance(plane, torch.Tensor)
    t = torch.as_tensor(np.asarray(plane)) if is_numpy else plane
    H, W = t.shape[-2:]
    if box.x0 < 0 or box.y0 < 0 or box.x1 > W or box.y1 > H:
        raise ValueError(f"box {box.as_list()} outside {W}x{H} plane")
    crop = t[..., box.y0:box.y1, box.x0:box.x1]
    if not torch.is_floating_point(crop):
        crop = crop.double()
    out = resize_bilinear(crop, (target, target))
    return out.numpy() if is_numpy else out


def _round_half_away(v: float) -> int:
    return int(math.floor(abs(v) + 0.5)) * (1 if v >= 0 else -1)


def _scale_span(lo: int, hi: int, ratio: float, size: int) -> tuple[int, int]:
    a = min(max(_round_half_away(lo * ratio), 0), size)
    b = min(max(_round_half_away(hi * ratio), 0), size)
    if b - a < 1:
        b = a + 1
        if b > size:
            a, b = size - 1, size
    return a, b


def scale_box(box: BoundingBox, full_size: tuple[int, int],
              layer_size: tuple[int, int]) -> BoundingBox:
    """Map a box from a (H, W) image onto a (h, w) grid.

    Coordinates are scaled, rounded half away from zero, and widened to at
    least one cell.
    """
    H, W = full_size
    h, w = layer_size
    if h < 1 or w < 1:
        raise ValueError("layer size must be at least 1x1")
    x0, x1 = _scale_span(box.x0, box.x1, w / W, w)
    y0, y1 = _scale_span(box.y0, box.y1, h / H, h)
    return replace(box, x0=x0, y0=y0, x1=x1, y1=y1)


scale_box_to_layer = scale_box
