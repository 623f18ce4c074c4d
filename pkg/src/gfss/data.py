"""Class taxonomy, fold splits, support sampling and the synthetic shapes dataset."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from gfss import BACKGROUND_ID, IGNORE_ID
from gfss.errors import ConfigurationError, DataError

# images are stored normalized: (rgb - PIXEL_MEAN) / PIXEL_STD, so 0 is the dataset mean
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class ClassTaxonomy:
    base_ids: tuple[int, ...]
    novel_ids: tuple[int, ...]
    background_id: int = BACKGROUND_ID

    def __post_init__(self):
        object.__setattr__(self, "base_ids", tuple(int(i) for i in self.base_ids))
        object.__setattr__(self, "novel_ids", tuple(int(i) for i in self.novel_ids))
        if not self.base_ids or not self.novel_ids:
            raise ConfigurationError("taxonomy needs at least one base and one novel class")
        ids = self.base_ids + self.novel_ids + (self.background_id,)
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"class ids must be distinct: {ids}")
        if self.background_id != BACKGROUND_ID:
            raise ConfigurationError("background id is always 0")
        if IGNORE_ID in ids:
            raise ConfigurationError(f"{IGNORE_ID} is reserved for ignored pixels")

    @property
    def num_base(self) -> int:
        return len(self.base_ids)

    @property
    def num_novel(self) -> int:
        return len(self.novel_ids)

    @property
    def known_ids(self) -> frozenset[int]:
        return frozenset((self.background_id, IGNORE_ID) + self.base_ids + self.novel_ids)

    def label_table(self, include_novel: bool = True) -> np.ndarray:
        """Lookup table mapping global class ids to output channels.

        Channel 0 is background, 1..M are base classes in ``base_ids`` order
        and M+1..M+N novel classes. With ``include_novel=False`` novel ids map
        to background. Unknown ids map to -1.
        """
        table = np.full(256, -1, dtype=np.int64)
        table[self.background_id] = 0
        table[IGNORE_ID] = IGNORE_ID
        for k, cid in enumerate(self.base_ids):
            table[cid] = 1 + k
        for k, cid in enumerate(self.novel_ids):
            table[cid] = 1 + self.num_base + k if include_novel else 0
        return table

    def to_channels(self, mask: np.ndarray, include_novel: bool = True) -> np.ndarray:
        check_mask_ids(mask, self)
        return self.label_table(include_novel)[mask]

    def to_dict(self) -> dict:
        return {"base_ids": list(self.base_ids), "novel_ids": list(self.novel_ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassTaxonomy":
        return cls(tuple(d["base_ids"]), tuple(d["novel_ids"]))


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3, normalized
    mask: np.ndarray  # H x W, global class ids
    sample_id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"{self.sample_id}: image must be HxWx3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise DataError(
                f"{self.sample_id}: mask {self.mask.shape} does not match image {self.image.shape[:2]}"
            )

    def class_ids(self) -> list[int]:
        return [int(c) for c in np.unique(self.mask) if c not in (BACKGROUND_ID, IGNORE_ID)]


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 8
    num_folds: int = 2
    images_per_class: int = 20
    image_size: tuple[int, int] = (64, 64)
    seed: int = 0
    test_images_per_class: int | None = None
    second_object_prob: float = 0.6

    def validate(self):
        if self.num_classes < 2 or self.num_folds < 1:
            raise ConfigurationError("need >= 2 classes and >= 1 fold")
        if self.num_classes % self.num_folds:
            raise ConfigurationError(
                f"num_classes={self.num_classes} is not divisible by num_folds={self.num_folds}"
            )
        if self.num_classes >= IGNORE_ID:
            raise ConfigurationError("too many classes for 8-bit masks")
        if min(self.image_size) < 16:
            raise ConfigurationError("image_size must be at least 16x16")
        if self.images_per_class < 1:
            raise ConfigurationError("images_per_class must be positive")
        if not 0.5 <= self.second_object_prob <= 1.0:
            raise ConfigurationError("second_object_prob must lie in [0.5, 1]")

    @property
    def num_test_per_class(self) -> int:
        if self.test_images_per_class is not None:
            return self.test_images_per_class
        return max(1, self.images_per_class // 2)


def check_mask_ids(mask: np.ndarray, taxonomy: ClassTaxonomy) -> None:
    present = set(np.unique(mask).tolist())
    unknown = present - taxonomy.known_ids
    if unknown:
        raise DataError(f"mask contains unknown class ids {sorted(unknown)}")


def split_folds(
    all_class_ids: Sequence[int],
    num_folds: int,
    fold_index: int,
    novel_override: Iterable[int] | None = None,
) -> ClassTaxonomy:
    """Novel classes are the ``fold_index``-th contiguous block of ids.

    ``novel_override`` replaces the block with an explicit class list (used for
    hand-picked splits such as vehicles vs. animals).
    """
    ids = list(all_class_ids)
    if novel_override is not None:
        novel = [int(c) for c in novel_override]
        missing = set(novel) - set(ids)
        if missing:
            raise ConfigurationError(f"override novel ids {sorted(missing)} not in class list")
        return ClassTaxonomy(tuple(c for c in ids if c not in novel), tuple(novel))
    if num_folds < 1 or len(ids) % num_folds:
        raise ConfigurationError(f"{len(ids)} classes cannot be split evenly into {num_folds} folds")
    if not 0 <= fold_index < num_folds:
        raise IndexError(f"fold_index {fold_index} out of range for {num_folds} folds")
    size = len(ids) // num_folds
    novel = ids[fold_index * size : (fold_index + 1) * size]
    base = ids[: fold_index * size] + ids[(fold_index + 1) * size :]
    return ClassTaxonomy(tuple(base), tuple(novel))


def relabel_for_pretraining(sample: Sample, taxonomy: ClassTaxonomy) -> Sample:
    """Return a copy with novel-class pixels set to background."""
    check_mask_ids(sample.mask, taxonomy)
    mask = sample.mask.copy()
    mask[np.isin(mask, taxonomy.novel_ids)] = taxonomy.background_id
    return Sample(sample.image, mask, sample.sample_id)


def base_training_set(samples: Sequence[Sample], taxonomy: ClassTaxonomy) -> list[Sample]:
    """Images containing at least one base class, relabeled for pre-training."""
    out = []
    for s in samples:
        if np.isin(s.mask, taxonomy.base_ids).any():
            out.append(relabel_for_pretraining(s, taxonomy))
    return out


def sample_support_set(
    novel_pool: Sequence[Sample], taxonomy: ClassTaxonomy, K: int, seed: int
) -> list[Sample]:
    """K images per novel class, class-major order, deterministic in ``seed``.

    Sample ``k`` of the result is designated to ``taxonomy.novel_ids[k // K]``.
    All labeled pixels are kept as-is.
    """
    if K < 1:
        raise ConfigurationError("K must be >= 1")
    rng = np.random.default_rng(seed)
    pool = sorted(novel_pool, key=lambda s: s.sample_id)
    support = []
    for cid in taxonomy.novel_ids:
        candidates = [s for s in pool if (s.mask == cid).any()]
        if len(candidates) < K:
            raise DataError(f"novel class {cid} has {len(candidates)} candidate images, need {K}")
        picks = rng.choice(len(candidates), size=K, replace=False)
        support.extend(candidates[i] for i in picks)
    return support


# -- synthetic shapes ---------------------------------------------------------

def _shape_circle(u, v):
    return u**2 + v**2 <= 1.0


def _shape_square(u, v):
    return np.maximum(np.abs(u), np.abs(v)) <= 0.8


def _shape_triangle(u, v):
    return (v <= 0.8) & (np.abs(u) <= (v + 1.0) * 0.5)


def _shape_diamond(u, v):
    return np.abs(u) + np.abs(v) <= 1.0


def _shape_ring(u, v):
    r2 = u**2 + v**2
    return (r2 <= 1.0) & (r2 >= 0.3)


def _shape_cross(u, v):
    return ((np.abs(u) <= 0.35) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.35) & (np.abs(u) <= 1.0))


def _shape_bar(u, v):
    return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.4)


def _shape_halfdisk(u, v):
    return (u**2 + v**2 <= 1.0) & (v >= -0.2)


SHAPES = (
    _shape_circle,
    _shape_square,
    _shape_triangle,
    _shape_diamond,
    _shape_ring,
    _shape_cross,
    _shape_bar,
    _shape_halfdisk,
)


def class_color(class_id: int, num_classes: int) -> np.ndarray:
    """One hue per class, spread by golden-ratio steps.

    Any contiguous block of class ids covers the colour wheel, so novel
    classes of every fold sit between base hues instead of in a region no
    base class has seen.
    """
    import colorsys

    hue = ((class_id - 1) * 0.6180339887) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.95))


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    level = rng.uniform(0.25, 0.55)
    tint = rng.normal(0.0, 0.03, size=3)
    coarse = rng.normal(0.0, 0.08, size=(h // 8 + 1, w // 8 + 1, 3))
    smooth = np.kron(coarse, np.ones((8, 8, 1)))[:h, :w]
    grain = rng.normal(0.0, 0.03, size=(h, w, 3))
    return np.clip(level + tint + smooth + grain, 0.0, 1.0)


def _render_object(rng, img, mask, class_id, num_classes):
    h, w = mask.shape
    side = min(h, w)
    radius_y = rng.uniform(0.14, 0.28) * side
    radius_x = radius_y * rng.uniform(0.75, 1.33)
    cy = rng.uniform(0.15 * h, 0.85 * h)
    cx = rng.uniform(0.15 * w, 0.85 * w)
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5 - cx) / radius_x
    v = (yy + 0.5 - cy) / radius_y
    region = SHAPES[(class_id - 1) % len(SHAPES)](u, v)
    color = np.clip(class_color(class_id, num_classes) + rng.normal(0.0, 0.04, size=3), 0.0, 1.0)
    texture = rng.normal(0.0, 0.03, size=(h, w, 3))
    img[region] = np.clip(color + texture[region], 0.0, 1.0)
    mask[region] = class_id
    return region


def _render_image(rng, spec: DatasetSpec, primary: int) -> tuple[np.ndarray, np.ndarray]:
    h, w = spec.image_size
    min_visible = max(16, (h * w) // 200)
    while True:
        img = _background(rng, h, w)
        mask = np.zeros((h, w), dtype=np.uint8)
        classes = [primary]
        if rng.random() < spec.second_object_prob:
            other = int(rng.integers(1, spec.num_classes))
            classes.append(other if other < primary else other + 1)
            rng.shuffle(classes)
        for cid in classes:
            _render_object(rng, img, mask, cid, spec.num_classes)
        if all((mask == cid).sum() >= min_visible for cid in classes):
            return img, mask


def generate_synthetic_dataset(spec: DatasetSpec) -> tuple[list[Sample], list[Sample]]:
    """Render a train/test split of coloured parametric shapes on textured backgrounds.

    Every class has its own shape family and hue. Each image carries one
    designated object and, with probability ``second_object_prob``, an object
    of another class. Masks are exact; output is a pure function of ``spec``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    splits = []
    for split, per_class in (("train", spec.images_per_class), ("test", spec.num_test_per_class)):
        samples = []
        for cid in range(1, spec.num_classes + 1):
            for _ in range(per_class):
                img, mask = _render_image(rng, spec, cid)
                image = ((img - PIXEL_MEAN) / PIXEL_STD).astype(np.float32)
                samples.append(Sample(image, mask, f"{split}_{len(samples):05d}"))
        splits.append(samples)
    return splits[0], splits[1]


def denormalize(image: np.ndarray) -> np.ndarray:
    return image * PIXEL_STD + PIXEL_MEAN


# -- on-disk layout -------------------------------------------------------------

MANIFEST_NAME = "manifest.txt"


def save_split(samples: Sequence[Sample], directory: str | os.PathLike) -> Path:
    """Write ``<id>_image.npy``/``<id>_mask.npy`` pairs plus a tab-separated manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        image_path = f"{s.sample_id}_image.npy"
        mask_path = f"{s.sample_id}_mask.npy"
        np.save(directory / image_path, s.image.astype(np.float32))
        np.save(directory / mask_path, s.mask.astype(np.uint8))
        ids = ",".join(str(c) for c in s.class_ids())
        lines.append(f"{s.sample_id}\t{image_path}\t{mask_path}\t{ids}\n")
    manifest = directory / MANIFEST_NAME
    manifest.write_text("".join(lines))
    return manifest


def _read_array(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    from PIL import Image

    return np.asarray(Image.open(path))


def load_split(directory: str | os.PathLike) -> list[Sample]:
    """Read a split written by :func:`save_split`.

    Any dataset can be adapted by producing the same manifest: one line per
    sample with ``sample_id<TAB>image<TAB>mask<TAB>comma-separated ids``,
    paths relative to the manifest. ``.png`` files are accepted too; 8-bit
    images are normalized on load.
    """
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise DataError(f"no {MANIFEST_NAME} in {directory}")
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{manifest}:{lineno}: expected 4 tab-separated fields")
        sample_id, image_path, mask_path, _ = parts
        image = _read_array(directory / image_path)
        if image.dtype == np.uint8:
            image = (image / 255.0 - PIXEL_MEAN) / PIXEL_STD
        mask = _read_array(directory / mask_path)
        samples.append(Sample(image.astype(np.float32), mask.astype(np.uint8), sample_id))
    return samples


def save_dataset(train: Sequence[Sample], test: Sequence[Sample], root: str | os.PathLike) -> None:
    root = Path(root)
    save_split(train, root / "train")
    save_split(test, root / "test")
