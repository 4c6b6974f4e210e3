"""RGB <-> CIE L*a*b* conversion and L/ab plane handling.

All conversions use the sRGB transfer curve and the D65 white point.
Networks never see raw Lab values: lightness goes in as ``L / 50 - 1`` and
chrominance is predicted as ``ab / 128``. The helpers at the bottom of the
module do those mappings.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from skimage import color

AB_SCALE = 128.0
L_CENTER = 50.0


@dataclass
class LabImage:
    """Lightness plane ``L`` (H, W) in [0, 100] plus chrominance ``ab`` (2, H, W)."""

    L: np.ndarray
    ab: np.ndarray

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=np.float64)
        self.ab = np.asarray(self.ab, dtype=np.float64)
        if self.L.ndim != 2 or self.L.size == 0:
            raise ValueError(f"L must be a nonempty 2-D plane, got shape {self.L.shape}")
        if self.ab.shape != (2,) + self.L.shape:
            raise ValueError(
                f"ab shape {self.ab.shape} does not match L shape {self.L.shape}"
            )

    @property
    def height(self) -> int:
        return self.L.shape[0]

    @property
    def width(self) -> int:
        return self.L.shape[1]


def _as_unit_rgb(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[-1] != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"expected a nonempty (H, W, 3) raster, got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.integer):
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("8-bit raster values must lie in [0, 255]")
        return arr.astype(np.float64) / 255.0
    arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("raster contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("float raster values must lie in [0, 1]")
    return arr


def rgb_to_lab(image) -> LabImage:
    """Convert an (H, W, 3) sRGB raster to a :class:`LabImage`.

    Integer rasters are read as 8-bit; float rasters must already be in
    [0, 1].
    """
    lab = color.rgb2lab(_as_unit_rgb(image), illuminant="D65")
    L = np.clip(lab[..., 0], 0.0, 100.0)
    return LabImage(L=L, ab=np.moveaxis(lab[..., 1:], -1, 0))


def lab_to_rgb(img: LabImage, as_uint8: bool = False) -> np.ndarray:
    """Convert back to an (H, W, 3) sRGB raster clipped to [0, 1].

    Zero lightness decodes to black whatever its chroma. With ``as_uint8``
    the result is rounded to 8-bit.
    """
    if not (np.all(np.isfinite(img.L)) and np.all(np.isfinite(img.ab))):
        raise ValueError("LabImage contains non-finite values")
    lab = np.concatenate([img.L[None], img.ab], axis=0)
    with warnings.catch_warnings():
        # out-of-gamut predictions are expected; the result is clipped below
        warnings.simplefilter("ignore", UserWarning)
        rgb = color.lab2rgb(np.moveaxis(lab, 0, -1), illuminant="D65")
    rgb = np.clip(rgb, 0.0, 1.0)
    rgb[img.L <= 0.0] = 0.0
    if as_uint8:
        return np.round(rgb * 255.0).astype(np.uint8)
    return rgb


def split_channels(img: LabImage) -> tuple[np.ndarray, np.ndarray]:
    return img.L, img.ab


def merge_channels(L, ab) -> LabImage:
    L = np.asarray(L, dtype=np.float64)
    ab = np.asarray(ab, dtype=np.float64)
    if ab.shape != (2,) + L.shape:
        raise ValueError(f"cannot merge L {L.shape} with ab {ab.shape}")
    return LabImage(L=L, ab=ab)


def normalize_l(L):
    return L / L_CENTER - 1.0


def denormalize_l(x):
    return (x + 1.0) * L_CENTER


def normalize_ab(ab):
    return ab / AB_SCALE


def denormalize_ab(x):
    return x * AB_SCALE
