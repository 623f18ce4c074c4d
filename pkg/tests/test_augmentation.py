import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from gfss import IGNORE_ID
from gfss.augmentation import (
    BoundingBox,
    apply_cutout,
    cutout_region,
    extract_boxes,
    hflip,
    random_crop,
    randaugment_variant,
    sample_cutout_center,
    strong_augment,
    weak_augment,
)
from gfss.data import Sample
from gfss.errors import ConfigurationError, CutoutFallbackWarning


def _sample(h=16, w=16, seed=0, mask=None):
    r = np.random.default_rng(seed)
    m = np.zeros((h, w), np.uint8) if mask is None else np.asarray(mask, np.uint8)
    return Sample(r.normal(size=m.shape + (3,)).astype(np.float32), m, "x")


# -- weak pipeline ------------------------------------------------------------------------

def test_flip_is_involution():
    s = _sample(seed=1, mask=np.arange(16 * 16).reshape(16, 16) % 7)
    back = hflip(hflip(s))
    assert np.array_equal(back.image, s.image) and np.array_equal(back.mask, s.mask)
    assert np.array_equal(hflip(s).mask[:, 0], s.mask[:, -1])


def test_exact_size_crop_is_identity(rng):
    s = _sample(12, 20)
    out = random_crop(s, (12, 20), rng)
    assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)


def test_crop_pads_with_ignore(rng):
    s = _sample(8, 8, mask=np.ones((8, 8)))
    out = random_crop(s, (10, 12), rng)
    assert out.mask.shape == (10, 12) and out.image.shape == (10, 12, 3)
    assert (out.mask == IGNORE_ID).sum() == 10 * 12 - 64
    assert np.all(out.image[out.mask == IGNORE_ID] == 0)


def test_weak_augment_deterministic_and_aligned():
    mask = np.zeros((20, 20), np.uint8)
    mask[3:9, 5:15] = 4
    s = _sample(20, 20, mask=mask)
    a = weak_augment(s, np.random.default_rng(9), (12, 12))
    b = weak_augment(s, np.random.default_rng(9), (12, 12))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
    # image and mask moved together: object pixels keep their original image values
    flips = {0: s, 1: hflip(s)}
    found = False
    for src in flips.values():
        for y in range(9):
            for x in range(9):
                if np.array_equal(src.image[y:y + 12, x:x + 12], a.image):
                    assert np.array_equal(src.mask[y:y + 12, x:x + 12], a.mask)
                    found = True
    assert found


# -- boxes --------------------------------------------------------------------------------

def test_box_examples():
    mask = np.zeros((30, 30), np.uint8)
    mask[5:15, 5:15] = 3
    assert [b.as_tuple() for b in extract_boxes(mask)] == [(5, 5, 14, 14)]
    mask[20:22, 20:25] = 3
    assert len(extract_boxes(mask)) == 2
    assert extract_boxes(np.zeros((5, 5), np.uint8)) == []
    assert extract_boxes(np.full((5, 5), IGNORE_ID, np.uint8)) == []


def test_diagonal_touch_is_two_components():
    mask = np.zeros((4, 4), np.uint8)
    mask[0, 0] = mask[1, 1] = 2
    assert len(extract_boxes(mask)) == 2


def _random_mask(r, h=24, w=24):
    mask = np.zeros((h, w), np.uint8)
    for _ in range(r.integers(1, 5)):
        y, x = r.integers(0, h - 2), r.integers(0, w - 2)
        mask[y:y + r.integers(1, 8), x:x + r.integers(1, 8)] = r.integers(1, 4)
    return mask


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_boxes_are_tight(seed):
    mask = _random_mask(np.random.default_rng(seed))
    for b in extract_boxes(mask):
        region = mask[b.y_min:b.y_max + 1, b.x_min:b.x_max + 1] == b.class_id
        assert region[0].any() and region[-1].any() and region[:, 0].any() and region[:, -1].any()


# -- cutout centres ----------------------------------------------------------------------

def test_ocutout_fallback_when_box_fills_image(rng):
    with pytest.warns(CutoutFallbackWarning):
        x, y = sample_cutout_center([BoundingBox(1, 0, 0, 7, 7)], (8, 8), "ocutout", rng)
    assert 0 <= x < 8 and 0 <= y < 8
    with pytest.warns(CutoutFallbackWarning):
        sample_cutout_center([], (8, 8), "bcutout", rng)


def test_unknown_mode(rng):
    with pytest.raises(ConfigurationError):
        sample_cutout_center([], (8, 8), "zcutout", rng)


def test_singleton_box_bcutout(rng):
    for _ in range(20):
        assert sample_cutout_center([BoundingBox(1, 3, 6, 3, 6)], (10, 10), "bcutout", rng) == (3, 6)


def test_bcutout_uniform_over_perimeter():
    # brute-force perimeter of the 3x3 box (2,2)-(4,4)
    perimeter = [(x, y) for x in range(2, 5) for y in range(2, 5) if x in (2, 4) or y in (2, 4)]
    assert len(perimeter) == 8
    r = np.random.default_rng(0)
    box = [BoundingBox(1, 2, 2, 4, 4)]
    draws = [sample_cutout_center(box, (8, 8), "bcutout", r) for _ in range(10_000)]
    assert set(draws) == set(perimeter)
    counts = [draws.count(p) for p in perimeter]
    assert stats.chisquare(counts).pvalue > 0.001


@pytest.mark.parametrize("mode", ["wcutout", "ocutout", "icutout"])
def test_other_modes_respect_their_region(mode, rng):
    box = BoundingBox(1, 2, 3, 5, 6)
    for _ in range(200):
        x, y = sample_cutout_center([box], (10, 12), mode, rng)
        inside = 2 <= x <= 5 and 3 <= y <= 6
        if mode == "wcutout":
            assert inside
        elif mode == "ocutout":
            assert not inside
        assert 0 <= x < 12 and 0 <= y < 10


# -- cutout application --------------------------------------------------------------------

def _changed(a, b):
    return int(np.any(a != b, axis=-1).sum())


def test_cutout_centre_and_corner():
    img = np.ones((64, 64, 3), np.float32)
    assert _changed(img, apply_cutout(img, (32, 32), 16)) == 256
    assert _changed(img, apply_cutout(img, (0, 0), 16)) == 64


def test_cutout_idempotent_and_fill():
    img = np.random.default_rng(2).normal(size=(20, 20, 3))
    once = apply_cutout(img, (7, 11), 8)
    assert np.array_equal(apply_cutout(once, (7, 11), 8), once)
    assert np.all(once[7:15, 3:11] == 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 19), st.integers(0, 14), st.integers(1, 12))
def test_cutout_region_clipping_oracle(x, y, size):
    img = np.ones((15, 20, 1))
    out = apply_cutout(img, (x, y), size)
    # independent oracle: count grid cells whose offset lies in [-size//2, size - size//2)
    expected = np.zeros((15, 20), bool)
    for yy in range(15):
        for xx in range(20):
            if -(size // 2) <= yy - y < size - size // 2 and -(size // 2) <= xx - x < size - size // 2:
                expected[yy, xx] = True
    assert np.array_equal(out[..., 0] == 0, expected)
    rows, cols = cutout_region((x, y), (15, 20), size)
    assert expected[rows, cols].all()


def test_cutout_centre_outside_image():
    with pytest.raises(ValueError):
        apply_cutout(np.zeros((4, 4, 3)), (4, 0), 2)


# -- strong pipeline -----------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["bcutout", "wcutout", "icutout"]))
def test_strong_differs_only_inside_region(seed, mode):
    r = np.random.default_rng(seed)
    s = _sample(24, 24, seed=seed, mask=_random_mask(r))
    pair = strong_augment(s, mode, r, size=8)
    rows, cols = cutout_region(pair.cutout_center, (24, 24), 8)
    outside = np.ones((24, 24), bool)
    outside[rows, cols] = False
    assert np.array_equal(pair.strong.image[outside], s.image[outside])
    assert _changed(pair.strong.image, s.image) <= 64
    assert np.array_equal(pair.strong.mask, s.mask)


def test_icutout_on_blank_mask(rng):
    s = _sample(16, 16)
    pair = strong_augment(s, "icutout", rng, size=4)
    assert pair.cutout_center is not None
    assert _changed(pair.strong.image, s.image) > 0


def test_randaugment_zero_magnitude_is_identity():
    s = _sample()
    s = Sample(np.clip(s.image, -1.9, 1.9), s.mask, s.sample_id)
    out = randaugment_variant(s, np.random.default_rng(0), magnitude=0.0).strong
    assert np.allclose(out.image, s.image, atol=1e-5)


def test_randaugment_range_and_determinism():
    from gfss.data import PIXEL_MEAN, PIXEL_STD

    s = _sample(seed=4)
    a = randaugment_variant(s, np.random.default_rng(5), magnitude=0.9).strong
    b = randaugment_variant(s, np.random.default_rng(5), magnitude=0.9).strong
    assert np.array_equal(a.image, b.image)
    raw = a.image * PIXEL_STD + PIXEL_MEAN
    assert raw.min() >= -1e-6 and raw.max() <= 1 + 1e-6
    assert np.array_equal(a.mask, s.mask)
