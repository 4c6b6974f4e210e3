"""Image-quality metrics and the full-image / instance-level evaluation protocols.

Predictions are recomposed with the ground-truth L plane, converted to 8-bit
RGB, and compared against the ground-truth RGB. PSNR uses peak 255. SSIM is
the Gaussian-window (11x11, sigma 1.5) variant computed on each RGB channel
and averaged over channels.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .colorspace import denormalize_ab, lab_to_rgb, merge_channels
from .data import Sample
from .detection import BoundingBox

log = logging.getLogger(__name__)

INF = math.inf
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
FAILED = "failed"

Colorize = Callable[[Sample, int], torch.Tensor]
PerceptualMetric = Callable[[np.ndarray, np.ndarray], float]


def psnr(a, b, peak: float = 255.0) -> float:
    """PSNR in dB; ``math.inf`` when the inputs are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return INF
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-D array with 1-D kernel ``k``."""
    n = k.size
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=1) @ k
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=0) @ k


def ssim_channel(x: np.ndarray, y: np.ndarray, data_range: float = 255.0) -> float:
    k = _gaussian_kernel()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_x = _filter_valid(x, k)
    mu_y = _filter_valid(y, k)
    var_x = _filter_valid(x * x, k) - mu_x * mu_x
    var_y = _filter_valid(y * y, k) - mu_y * mu_y
    cov = _filter_valid(x * y, k) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def ssim(a, b, data_range: float = 255.0) -> float:
    """Mean of per-channel SSIM for (H, W, C) rasters (or a single (H, W) plane)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if a.ndim == 2:
        return ssim_channel(a, b, data_range)
    return float(np.mean([ssim_channel(a[..., c], b[..., c], data_range)
                          for c in range(a.shape[-1])]))


def perceptual_metric_hook(a, b, plugin: PerceptualMetric | None = None):
    """Run an external perceptual metric. None without a plugin, FAILED if it raises."""
    if plugin is None:
        return None
    try:
        return float(plugin(a, b))
    except Exception as exc:  # plugin errors must not abort an evaluation run
        log.warning("perceptual metric failed: %s", exc)
        return FAILED


def _mean(values) -> float:
    vals = [v for v in values if isinstance(v, (int, float))]
    if not vals:
        return math.nan
    if any(math.isinf(v) for v in vals):
        return INF
    return float(sum(vals) / len(vals))


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


@dataclass
class MetricReport:
    protocol: str
    rows: list[dict] = field(default_factory=list)
    has_perceptual: bool = False
    skipped: int = 0
    tag: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.rows)

    @property
    def columns(self) -> list[str]:
        cols = ["id", "psnr_db", "ssim"]
        return cols + ["perceptual"] if self.has_perceptual else cols

    def means(self) -> dict:
        out = {"psnr_db": _mean(r["psnr_db"] for r in self.rows),
               "ssim": _mean(r["ssim"] for r in self.rows)}
        if self.has_perceptual:
            out["perceptual"] = _mean(r.get("perceptual") for r in self.rows)
        return out

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "tag": self.tag,
            "count": self.count,
            "skipped": self.skipped,
            "rows": [{c: _jsonable(r.get(c)) for c in self.columns} for r in self.rows],
            "means": {k: _jsonable(v) for k, v in self.means().items()},
        }

    def write(self, out_dir, stem: str | None = None) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.protocol
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for r in self.rows:
                writer.writerow([_fmt(r.get(c)) for c in self.columns])
            means = self.means()
            writer.writerow(["mean"] + [_fmt(means[c]) for c in self.columns[1:]])
        json_path.write_text(json.dumps(self.to_dict(), indent=1))
        return csv_path, json_path


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return "" if v is None else str(v)


def recompose_rgb(sample: Sample, ab_pred) -> np.ndarray:
    """Combine the ground-truth L with predicted normalized ab; returns 8-bit RGB."""
    ab = ab_pred.detach().cpu().numpy() if isinstance(ab_pred, torch.Tensor) else ab_pred
    ab = np.asarray(ab, dtype=np.float64).reshape((2,) + sample.lab.L.shape)
    return lab_to_rgb(merge_channels(sample.lab.L, denormalize_ab(ab)), as_uint8=True)


def instance_crops(rgb: np.ndarray, boxes: Sequence[BoundingBox]) -> list[np.ndarray]:
    return [rgb[b.y0:b.y1, b.x0:b.x1] for b in boxes]


def _score(ident, pred, gt, perceptual):
    row = {"id": ident, "psnr_db": psnr(pred, gt), "ssim": ssim(pred, gt)}
    if perceptual is not None:
        row["perceptual"] = perceptual_metric_hook(pred, gt, perceptual)
    return row


@torch.no_grad()
def predict_rgb(colorize: Colorize, samples: Sequence[Sample]) -> list[np.ndarray]:
    return [recompose_rgb(s, colorize(s, n)) for n, s in enumerate(samples)]


def evaluate_full(colorize: Colorize, samples: Sequence[Sample],
                  perceptual: PerceptualMetric | None = None,
                  predictions: Sequence[np.ndarray] | None = None) -> MetricReport:
    """Per-image PSNR/SSIM of recomposed predictions against ground-truth RGB."""
    if not samples:
        raise ValueError("empty dataset")
    preds = predictions if predictions is not None else predict_rgb(colorize, samples)
    report = MetricReport("full_image", has_perceptual=perceptual is not None)
    for s, pred in zip(samples, preds):
        report.rows.append(_score(s.image_id, pred, s.rgb, perceptual))
    return report


def evaluate_instance_level(colorize: Colorize, samples: Sequence[Sample],
                            gt_boxes: Sequence[Sequence[BoundingBox]] | None = None,
                            perceptual: PerceptualMetric | None = None,
                            predictions: Sequence[np.ndarray] | None = None) -> MetricReport:
    """Metrics on ground-truth box crops, averaged over instances.

    Crops smaller than the SSIM window are skipped and counted in ``skipped``.
    """
    if not samples:
        raise ValueError("empty dataset")
    gt_boxes = gt_boxes if gt_boxes is not None else [s.boxes for s in samples]
    preds = predictions if predictions is not None else predict_rgb(colorize, samples)
    report = MetricReport("instance_level", has_perceptual=perceptual is not None)
    for s, pred, boxes in zip(samples, preds, gt_boxes):
        for k, (p, g) in enumerate(zip(instance_crops(pred, boxes), instance_crops(s.rgb, boxes))):
            if min(p.shape[:2]) < SSIM_WINDOW:
                report.skipped += 1
                continue
            report.rows.append(_score(f"{s.image_id}/{k}", p, g, perceptual))
    return report
