"""Weak/strong augmentation for consistency learning and the context-oriented cutout family."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from gfss import BACKGROUND_ID, IGNORE_ID
from gfss.data import PIXEL_MEAN, PIXEL_STD, Sample
from gfss.errors import ConfigurationError, CutoutFallbackWarning

CUTOUT_MODES = ("bcutout", "wcutout", "ocutout", "icutout")


@dataclass(frozen=True)
class BoundingBox:
    class_id: int
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass
class AugmentedPair:
    weak: Sample
    strong: Sample
    cutout_center: tuple[int, int] | None


def hflip(sample: Sample) -> Sample:
    return Sample(sample.image[:, ::-1].copy(), sample.mask[:, ::-1].copy(), sample.sample_id)


def random_crop(sample: Sample, size: tuple[int, int], rng: np.random.Generator) -> Sample:
    """Crop to ``size``; smaller images are padded with 0 (image) and IGNORE_ID (mask) first."""
    ch, cw = size
    h, w = sample.mask.shape
    ph, pw = max(ch - h, 0), max(cw - w, 0)
    image, mask = sample.image, sample.mask
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), constant_values=0)
        mask = np.pad(mask, ((0, ph), (0, pw)), constant_values=IGNORE_ID)
    h, w = mask.shape
    y = int(rng.integers(0, h - ch + 1))
    x = int(rng.integers(0, w - cw + 1))
    return Sample(image[y : y + ch, x : x + cw].copy(), mask[y : y + ch, x : x + cw].copy(), sample.sample_id)


def weak_augment(sample: Sample, rng: np.random.Generator, crop_size: tuple[int, int] | None = None,
                 flip_prob: float = 0.5) -> Sample:
    """Random horizontal flip followed by a random crop (identical on image and mask)."""
    if rng.random() < flip_prob:
        sample = hflip(sample)
    size = crop_size if crop_size is not None else sample.mask.shape
    return random_crop(sample, tuple(size), rng)


def extract_boxes(mask: np.ndarray) -> list[BoundingBox]:
    """One tight box per 4-connected component of every foreground class."""
    boxes = []
    for cid in np.unique(mask):
        if cid in (BACKGROUND_ID, IGNORE_ID):
            continue
        labels, _ = ndimage.label(mask == cid)
        for sl in ndimage.find_objects(labels):
            ys, xs = sl
            boxes.append(BoundingBox(int(cid), xs.start, ys.start, xs.stop - 1, ys.stop - 1))
    return boxes


def eligible_pixels(boxes: list[BoundingBox], image_size: tuple[int, int], mode: str) -> np.ndarray:
    """Boolean (H, W) map of the pixels a cutout centre may be drawn from."""
    h, w = image_size
    if mode == "icutout":
        return np.ones((h, w), dtype=bool)
    inside = np.zeros((h, w), dtype=bool)
    border = np.zeros((h, w), dtype=bool)
    for b in boxes:
        inside[b.y_min : b.y_max + 1, b.x_min : b.x_max + 1] = True
        border[b.y_min, b.x_min : b.x_max + 1] = True
        border[b.y_max, b.x_min : b.x_max + 1] = True
        border[b.y_min : b.y_max + 1, b.x_min] = True
        border[b.y_min : b.y_max + 1, b.x_max] = True
    if mode == "bcutout":
        return border
    if mode == "wcutout":
        return inside
    if mode == "ocutout":
        return ~inside
    raise ConfigurationError(f"unknown cutout mode {mode!r}; expected one of {CUTOUT_MODES}")


def sample_cutout_center(boxes: list[BoundingBox], image_size: tuple[int, int], mode: str,
                         rng: np.random.Generator) -> tuple[int, int]:
    """Uniform draw of an (x, y) centre from the mode's eligible set.

    Falls back to the whole image, with a warning, when the set is empty.
    """
    allowed = eligible_pixels(boxes, image_size, mode)
    flat = np.flatnonzero(allowed)
    if flat.size == 0:
        warnings.warn(f"no eligible pixel for {mode}; falling back to icutout", CutoutFallbackWarning)
        flat = np.arange(allowed.size)
    idx = int(flat[rng.integers(0, flat.size)])
    y, x = divmod(idx, image_size[1])
    return x, y


def cutout_region(center: tuple[int, int], image_size: tuple[int, int], size: int):
    """Row and column slices of a size x size square at ``center``, clipped to the image."""
    x, y = center
    h, w = image_size
    lo = size // 2
    y0, x0 = max(y - lo, 0), max(x - lo, 0)
    y1, x1 = min(y - lo + size, h), min(x - lo + size, w)
    return slice(y0, y1), slice(x0, x1)


def apply_cutout(image: np.ndarray, center: tuple[int, int], size: int = 16, fill: float = 0.0) -> np.ndarray:
    """Copy of ``image`` with the square around ``center`` set to ``fill`` (the normalized mean)."""
    h, w = image.shape[:2]
    x, y = center
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"cutout centre {center} outside {w}x{h} image")
    out = image.copy()
    rows, cols = cutout_region(center, (h, w), size)
    out[rows, cols] = fill
    return out


def strong_augment(weak: Sample, mode: str, rng: np.random.Generator, size: int = 16) -> AugmentedPair:
    boxes = extract_boxes(weak.mask)
    center = sample_cutout_center(boxes, weak.mask.shape, mode, rng)
    strong = Sample(apply_cutout(weak.image, center, size), weak.mask.copy(), weak.sample_id)
    return AugmentedPair(weak, strong, center)


# -- photometric ablation -------------------------------------------------------

def _contrast(img, factor):
    mean = img.mean()
    return mean + factor * (img - mean)


def _brightness(img, factor):
    return img * factor


def _sharpness(img, factor):
    blurred = ndimage.uniform_filter(img, size=(3, 3, 1), mode="nearest")
    return blurred + factor * (img - blurred)


PHOTOMETRIC_OPS = {"contrast": _contrast, "brightness": _brightness, "sharpness": _sharpness}


def randaugment_variant(weak: Sample, rng: np.random.Generator, num_ops: int = 2,
                        max_magnitude: float = 0.9, magnitude: float | None = None) -> AugmentedPair:
    """Two distinct photometric ops with factor 1 +/- m, computed in [0, 1] pixel space and clamped.

    A magnitude of 0 leaves in-range images unchanged up to rounding.
    """
    names = list(PHOTOMETRIC_OPS)
    chosen = rng.choice(len(names), size=num_ops, replace=False)
    img = np.clip(weak.image * PIXEL_STD + PIXEL_MEAN, 0.0, 1.0)
    for k in chosen:
        m = rng.uniform(0.0, max_magnitude) if magnitude is None else magnitude
        sign = 1.0 if rng.random() < 0.5 else -1.0
        img = np.clip(PHOTOMETRIC_OPS[names[k]](img, 1.0 + sign * m), 0.0, 1.0)
    image = ((img - PIXEL_MEAN) / PIXEL_STD).astype(weak.image.dtype)
    return AugmentedPair(weak, Sample(image, weak.mask.copy(), weak.sample_id), None)
