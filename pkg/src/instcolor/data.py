"""Datasets: loading annotated image folders and generating the synthetic
toy fixture.

The fixture draws colored shapes on textured backgrounds. Each shape class
has one fixed color and its own lightness pattern, while every background
gets a random hue, so object color is predictable from what the object is
and background color is not. Unannotated distractor shapes share the object
lightness patterns but keep the background color; only the boxes tell them
apart from real objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .colorspace import LabImage, lab_to_rgb, normalize_ab, normalize_l, rgb_to_lab
from .detection import (AnnotationStore, BoundingBox, DetectionSet, ImageInfo,
                        crop_resize_instance, load_annotations, save_annotations,
                        scale_box, select_boxes)

# (a, b) chrominance per shape class; the darker texture stripes clip some of them to the gamut
SHAPE_COLORS = {
    "disk": (55.0, 40.0),
    "square": (-45.0, 40.0),
    "triangle": (15.0, -50.0),
    "cross": (5.0, 65.0),
}
SHAPES = tuple(SHAPE_COLORS)


@dataclass
class Sample:
    image_id: str
    rgb: np.ndarray  # (H, W, 3) uint8
    boxes: list[BoundingBox] = field(default_factory=list)
    masks: list[np.ndarray] | None = None  # per box, (H, W) bool

    def __post_init__(self):
        self.lab = rgb_to_lab(self.rgb)
        self.L = torch.from_numpy(normalize_l(self.lab.L)).float()[None]
        self.ab = torch.from_numpy(normalize_ab(self.lab.ab)).float()

    @property
    def size(self) -> tuple[int, int]:
        return self.rgb.shape[:2]

    @property
    def detections(self) -> DetectionSet:
        return DetectionSet(self.image_id, list(self.boxes))


def _shape_mask(kind: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2.0
    if kind == "disk":
        return (xx - c) ** 2 + (yy - c) ** 2 <= (size / 2.0) ** 2
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "triangle":
        return np.abs(xx - c) <= yy / 2.0
    if kind == "cross":
        t = size / 6.0
        return (np.abs(xx - c) <= t) | (np.abs(yy - c) <= t)
    raise ValueError(kind)


def _class_texture(kind: str, size: int) -> np.ndarray:
    """Per-class lightness pattern, so identity is visible in the L plane."""
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "disk":
        return 15.0 * ((yy // 2) % 2 * 2 - 1)
    if kind == "square":
        return 15.0 * ((xx // 2) % 2 * 2 - 1)
    if kind == "triangle":
        return 15.0 * (((xx + yy) // 2) % 2 * 2 - 1)
    return 15.0 * (((xx // 2) + (yy // 2)) % 2 * 2 - 1)


def _smooth_noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return n / (n.std() + 1e-12)


def synth_sample(image_id: str, size: int, rng: np.random.Generator,
                 max_objects: int = 3, max_distractors: int = 2, min_side: int | None = None,
                 max_side: int | None = None,
                 bg_chroma: tuple[float, float] = (4.0, 16.0)) -> Sample:
    min_side = min_side or max(6, size // 4)
    max_side = max_side or max(min_side + 1, size // 2)
    L = 60.0 + 18.0 * _smooth_noise(rng, (size, size), size / 12)
    hue = rng.uniform(0, 2 * np.pi)
    chroma = rng.uniform(*bg_chroma)
    ab = np.zeros((2, size, size))
    ab[0] = chroma * np.cos(hue)
    ab[1] = chroma * np.sin(hue)

    def place():
        kind = SHAPES[rng.integers(len(SHAPES))]
        side = int(rng.integers(min_side, max_side + 1))
        x0 = int(rng.integers(0, size - side + 1))
        y0 = int(rng.integers(0, size - side + 1))
        mask = np.zeros((size, size), dtype=bool)
        mask[y0:y0 + side, x0:x0 + side] = _shape_mask(kind, side)
        L[mask] = 60.0 + _class_texture(kind, size)[mask]
        return kind, mask

    # distractors look like objects in L but keep the background color
    for _ in range(rng.integers(0, max_distractors + 1)):
        place()
    boxes, masks = [], []
    for _ in range(rng.integers(1, max_objects + 1)):
        kind, mask = place()
        ab[0][mask], ab[1][mask] = SHAPE_COLORS[kind]
        ys, xs = np.nonzero(mask)
        boxes.append(BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1,
                                 int(ys.max()) + 1,
                                 confidence=round(float(rng.uniform(0.3, 1.0)), 4),
                                 label=kind))
        masks.append(mask)
    # later shapes occlude earlier ones
    for i in range(len(masks)):
        for later in masks[i + 1:]:
            masks[i] = masks[i] & ~later
    rgb = lab_to_rgb(LabImage(np.clip(L, 0, 100), ab), as_uint8=True)
    return Sample(image_id, rgb, boxes, masks)


def generate_samples(n: int, size: int = 64, seed: int = 0, **kw) -> list[Sample]:
    rng = np.random.default_rng(seed)
    return [synth_sample(f"img{idx:04d}", size, rng, **kw) for idx in range(n)]


def write_fixture(out_dir, n: int = 8, size: int = 64, seed: int = 0, **kw) -> Path:
    """Write ``n`` synthetic images, instance masks and ``annotations.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    infos, dets = [], {}
    for s in generate_samples(n, size, seed, **kw):
        rel = f"images/{s.image_id}.png"
        Image.fromarray(s.rgb).save(out / rel)
        infos.append(ImageInfo(s.image_id, size, size, rel))
        boxes = []
        for k, (box, mask) in enumerate(zip(s.boxes, s.masks)):
            mrel = f"masks/{s.image_id}_{k}.png"
            Image.fromarray(mask.astype(np.uint8) * 255).save(out / mrel)
            boxes.append(BoundingBox(box.x0, box.y0, box.x1, box.y1, box.confidence,
                                     box.label, mrel))
        dets[s.image_id] = DetectionSet(s.image_id, boxes)
    path = out / "annotations.json"
    save_annotations(path, infos, dets)
    return path


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _resize_rgb(rgb: np.ndarray, size: int) -> np.ndarray:
    return np.asarray(Image.fromarray(rgb).resize((size, size), Image.BILINEAR))


def load_dataset(annotations, resolution: int | None = None,
                 load_masks: bool = False) -> list[Sample]:
    """Load every image listed in an annotation file, resized to ``resolution``."""
    store = annotations if isinstance(annotations, AnnotationStore) \
        else load_annotations(annotations)
    samples = []
    for image_id, info in store.images.items():
        rgb = read_rgb(store.image_path(image_id))
        H, W = rgb.shape[:2]
        if (H, W) != (info.height, info.width):
            raise ValueError(f"{image_id}: image is {W}x{H}, annotation says "
                             f"{info.width}x{info.height}")
        boxes = list(store[image_id].boxes)
        target = (resolution, resolution) if resolution else (H, W)
        if target != (H, W):
            rgb = _resize_rgb(rgb, resolution)
            boxes = [scale_box(b, (H, W), target) for b in boxes]
        masks = None
        if load_masks:
            masks = []
            for b in boxes:
                if b.mask is None:
                    raise ValueError(f"{image_id}: box without an instance mask")
                m = read_rgb(store.root / b.mask)[..., 0]
                if m.shape != target:
                    m = np.asarray(Image.fromarray(m).resize(target[::-1], Image.NEAREST))
                masks.append(m > 127)
        samples.append(Sample(image_id, rgb, boxes, masks))
    return samples


def instance_pairs(sample: Sample, boxes: list[BoundingBox], resolution: int):
    """(L crop, ab crop) per box, both resized to resolution x resolution."""
    return [(crop_resize_instance(sample.L, b, resolution),
             crop_resize_instance(sample.ab, b, resolution)) for b in boxes]


def selected_boxes(sample: Sample, strategy: str = "top_k", k: int = 8,
                   threshold: float = 0.5, seed: int = 0) -> list[BoundingBox]:
    return select_boxes(sample.detections, strategy, k, threshold, seed)
