from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from histoattn.errors import ConfigError
from histoattn.formats import read_image, read_raw_tensor
from histoattn.preprocess import (AugmentSpec, PreprocessConfig, augment, clahe, clip_histogram, median_filter,
                                  normalize, prepare, resize, run_pipeline, zero_pad)

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN_CFG = PreprocessConfig(pad=2, median_kernel=3, clahe_tiles=(4, 4), clahe_clip_limit=2.0,
                              target_size=(32, 32), augment=AugmentSpec(), seed=0)


def median_oracle(img, k):
    a = img.astype(int)
    H, W = a.shape
    r = k // 2
    out = np.zeros_like(img)
    for y in range(H):
        for x in range(W):
            vals = sorted(a[min(max(y + i, 0), H - 1), min(max(x + j, 0), W - 1)]
                          for i in range(-r, r + 1) for j in range(-r, r + 1))
            out[y, x] = vals[len(vals) // 2]
    return out


def clahe_oracle(img, tiles, clip):
    """Straight-line CLAHE: histogram -> clip -> redistribute -> CDF -> bilinear blend."""
    H, W = img.shape
    rows, cols = tiles
    lo, hi = int(img.min()), int(img.max())
    yb = [H * i // rows for i in range(rows + 1)]
    xb = [W * j // cols for j in range(cols + 1)]
    luts = {}
    for i in range(rows):
        for j in range(cols):
            hist = [0.0] * 256
            n = 0
            for y in range(yb[i], yb[i + 1]):
                for x in range(xb[j], xb[j + 1]):
                    hist[int(img[y, x])] += 1
                    n += 1
            limit = clip * n / 256
            while True:
                excess = sum(v - limit for v in hist if v > limit)
                if excess < 1:
                    break
                hist = [min(v, limit) + excess / 256 for v in hist]
            lut, run = [], 0.0
            for v in hist:
                run += v
                lut.append(lo + run * (hi - lo) / n)
            luts[i, j] = lut

    def neighbours(p, bounds):
        centres = [(bounds[t] + bounds[t + 1] - 1) / 2 for t in range(len(bounds) - 1)]
        if p <= centres[0]:
            return 0, 0, 0.0
        if p >= centres[-1]:
            last = len(centres) - 1
            return last, last, 0.0
        t = max(t for t in range(len(centres)) if centres[t] <= p)
        return t, t + 1, (p - centres[t]) / (centres[t + 1] - centres[t])

    out = np.zeros_like(img)
    for y in range(H):
        r0, r1, wy = neighbours(y, yb)
        for x in range(W):
            c0, c1, wx = neighbours(x, xb)
            v = int(img[y, x])
            top = (1 - wx) * luts[r0, c0][v] + wx * luts[r0, c1][v]
            bot = (1 - wx) * luts[r1, c0][v] + wx * luts[r1, c1][v]
            out[y, x] = int(np.floor((1 - wy) * top + wy * bot + 0.5))
    return out


def two_tile_fixture():
    # left tile: 3/4 of pixels at 60, 1/4 at 110; right tile: half 110, half 180
    img = np.empty((64, 64), dtype=np.uint8)
    yy, xx = np.mgrid[0:64, 0:32]
    img[:, :32] = np.where((yy % 2 == 0) & (xx % 2 == 0), 110, 60)
    img[:, 32:] = np.where((yy + xx) % 2 == 0, 110, 180)
    return img


# ---- zero padding ------------------------------------------------------------

def test_zero_pad_examples():
    img = np.array([[1, 2], [3, 4]], dtype=np.uint8)
    assert np.array_equal(zero_pad(img, 0), img)
    out = zero_pad(img, 1)
    assert out.shape == (4, 4)
    assert np.count_nonzero(out) == 4 and np.array_equal(out[1:3, 1:3], img)
    with pytest.raises(ConfigError):
        zero_pad(img, -1)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 3), st.integers(0, 2**32 - 1))
def test_zero_pad_preserves_sum(h, w, pad, seed):
    img = np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    out = zero_pad(img, pad)
    assert out.shape == (h + 2 * pad, w + 2 * pad, 3)
    assert int(out.astype(int).sum()) == int(img.astype(int).sum())


# ---- median ------------------------------------------------------------------

def test_median_examples():
    flat = np.full((6, 5), 77, dtype=np.uint8)
    assert np.array_equal(median_filter(flat, 3), flat)
    salt = np.zeros((5, 5), dtype=np.uint8)
    salt[2, 2] = 255
    assert not median_filter(salt, 3).any()
    with pytest.raises(ConfigError):
        median_filter(flat, 4)


@pytest.mark.parametrize("k", [3, 5])
@pytest.mark.parametrize("seed", range(4))
def test_median_matches_sort_oracle(k, seed):
    img = np.random.default_rng(seed).integers(0, 256, size=(16, 16), dtype=np.uint8)
    assert np.array_equal(median_filter(img, k), median_oracle(img, k))


def test_median_colour_is_per_channel(rng):
    img = rng.integers(0, 256, size=(9, 7, 3), dtype=np.uint8)
    out = median_filter(img, 3)
    for c in range(3):
        assert np.array_equal(out[:, :, c], median_oracle(img[:, :, c], 3))


def test_median_fixed_points_are_stable():
    step = np.zeros((8, 8), dtype=np.uint8)
    step[:, 4:] = 200
    once = median_filter(step, 3)
    assert np.array_equal(once, step)
    assert np.array_equal(median_filter(once, 3), once)


# ---- CLAHE -------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.integers(0, 255), st.integers(1, 4), st.integers(1, 4), st.floats(1.01, 10.0))
def test_clahe_identity_on_constant_images(value, rows, cols, clip):
    img = np.full((16, 12), value, dtype=np.uint8)
    assert np.array_equal(clahe(img, (rows, cols), clip), img)


def test_clahe_matches_reference_on_two_tile_fixture():
    img = two_tile_fixture()
    for clip in (1.5, 2.0, 4.0, 40.0):
        assert np.array_equal(clahe(img, (1, 2), clip), clahe_oracle(img, (1, 2), clip))


@pytest.mark.parametrize("tiles", [(2, 2), (3, 4)])
def test_clahe_matches_reference_on_random_images(tiles):
    img = np.random.default_rng(9).integers(20, 230, size=(24, 20), dtype=np.uint8)
    assert np.array_equal(clahe(img, tiles, 2.0), clahe_oracle(img, tiles, 2.0))


def test_clahe_unclipped_single_tile_is_histogram_equalisation():
    img = np.zeros((8, 8), dtype=np.uint8)
    img[:, 4:] = 255
    out = clahe(img, (1, 1), 1000.0)
    # half the pixels sit at or below 0, so 0 maps to 255 * 1/2 = 127.5 -> 128
    assert set(np.unique(out)) == {128, 255}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_clahe_output_in_range(seed):
    img = np.random.default_rng(seed).integers(0, 256, size=(17, 19), dtype=np.uint8)
    out = clahe(img, (3, 2), 2.0)
    assert out.dtype == np.uint8 and out.shape == img.shape


def test_clip_histogram_bound_and_mass():
    hist = np.zeros(256)
    hist[10], hist[20] = 500, 300
    limit = 2.0 * 800 / 256
    out = clip_histogram(hist, limit)
    assert abs(out.sum() - 800) < 1e-9
    assert out.max() <= limit + 1.0


def test_clahe_grey_rgb_matches_single_channel(rng):
    g = rng.integers(0, 256, size=(16, 16), dtype=np.uint8)
    rgb = np.repeat(g[:, :, None], 3, axis=2)
    out = clahe(rgb, (2, 2), 2.0)
    for c in range(3):
        assert np.array_equal(out[:, :, c], clahe(g, (2, 2), 2.0))


def test_clahe_config_errors():
    img = np.zeros((4, 4), dtype=np.uint8)
    with pytest.raises(ConfigError):
        clahe(img, (5, 1), 2.0)
    with pytest.raises(ConfigError):
        clahe(img, (1, 1), 1.0)


# ---- normalise / resize ------------------------------------------------------

def test_normalize_examples_and_round_trip():
    grid = np.arange(256, dtype=np.uint8).reshape(16, 16)
    t = normalize(grid)
    assert t.shape == (1, 16, 16)
    assert t.data[0, 0, 0] == 0.0 and t.data[0, 15, 15] == 1.0
    assert abs(normalize(np.array([[51]], dtype=np.uint8)).data.item() - 0.2) < 1e-15
    back = np.floor(t.data[0] * 255 + 0.5).astype(np.uint8)
    assert np.array_equal(back, grid)


def test_normalize_colour_layout(rng):
    img = rng.integers(0, 256, size=(3, 4, 3), dtype=np.uint8)
    t = normalize(img)
    assert t.shape == (3, 3, 4)
    assert np.array_equal(t.data[2], img[:, :, 2] / 255.0)


def test_resize_constant_and_identity(rng):
    assert np.array_equal(resize(np.full((5, 7), 9, dtype=np.uint8), (11, 3)), np.full((11, 3), 9))
    img = rng.integers(0, 256, size=(6, 6), dtype=np.uint8)
    assert np.array_equal(resize(img, (6, 6)), img)
    # a 2x downscale with half-pixel centres averages 2x2 blocks
    small = resize(np.kron(np.eye(2, dtype=np.uint8) * 200, np.ones((2, 2), dtype=np.uint8)), (2, 2))
    assert small.tolist() == [[200, 0], [0, 200]]


# ---- augmentation ------------------------------------------------------------

def test_augment_identity_spec(rng):
    img = rng.integers(0, 256, size=(10, 10), dtype=np.uint8)
    for seed in range(5):
        assert np.array_equal(augment(img, AugmentSpec(), seed), img)


def test_augment_rotation_involution(rng):
    img = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    spec = AugmentSpec(rotation_degrees=(180,))
    assert np.array_equal(augment(augment(img, spec, 1), spec, 2), img)
    quarter = AugmentSpec(rotation_degrees=(90,))
    out = img
    for s in range(4):
        out = augment(out, quarter, s)
    assert np.array_equal(out, img)


def test_augment_is_a_pure_function_of_seed(rng):
    img = rng.integers(0, 256, size=(12, 9), dtype=np.uint8)
    spec = AugmentSpec.standard()
    a, b = augment(img, spec, 42), augment(img, spec, 42)
    assert a.tobytes() == b.tobytes() and a.shape == img.shape
    assert any(not np.array_equal(augment(img, spec, s), a) for s in range(43, 50))


def test_augment_flip_and_brightness(rng):
    img = rng.integers(0, 256, size=(6, 6), dtype=np.uint8)
    outs = {augment(img, AugmentSpec(horizontal_flip=True), s).tobytes() for s in range(20)}
    assert outs == {img.tobytes(), img[:, ::-1].tobytes()}
    white = np.full((4, 4), 250, dtype=np.uint8)
    bright = [augment(white, AugmentSpec(brightness_delta=0.2), s) for s in range(20)]
    assert all(b.max() <= 255 for b in bright) and any((b == 255).all() for b in bright)


def test_augment_spec_bounds():
    with pytest.raises(ConfigError):
        AugmentSpec(rotation_degrees=(45,))
    with pytest.raises(ConfigError):
        AugmentSpec(zoom_range=(0.7, 1.0))
    with pytest.raises(ConfigError):
        AugmentSpec(zoom_range=(1.1, 1.0))
    with pytest.raises(ConfigError):
        AugmentSpec(brightness_delta=0.3)


# ---- pipeline ----------------------------------------------------------------

def test_pipeline_constant_image_without_padding():
    cfg = PreprocessConfig(pad=0, clahe_tiles=(2, 2), target_size=(8, 8), augment=AugmentSpec())
    t = run_pipeline(np.full((20, 14), 77, dtype=np.uint8), cfg)
    assert np.array_equal(t.data, np.full((1, 8, 8), 77 / 255.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(8, 40), st.integers(8, 40), st.sampled_from([1, 3]), st.booleans())
def test_pipeline_output_shape(h, w, c, training):
    img = np.random.default_rng(h * w).integers(0, 256, size=(h, w, c), dtype=np.uint8)
    cfg = PreprocessConfig(clahe_tiles=(4, 4), target_size=(16, 24))
    assert run_pipeline(img, cfg, training=training, seed=3).shape == (c, 16, 24)


def test_pipeline_order_matches_stagewise_composition(rng):
    img = rng.integers(0, 256, size=(30, 26), dtype=np.uint8)
    cfg = PreprocessConfig(pad=1, median_kernel=3, clahe_tiles=(3, 3), target_size=(20, 20))
    staged = resize(clahe(median_filter(zero_pad(img, 1), 3), (3, 3), 2.0), (20, 20))
    assert np.array_equal(prepare(img, cfg), staged)
    expect = normalize(augment(staged, cfg.augment, 5)).data
    assert np.array_equal(run_pipeline(img, cfg, training=True, seed=5).data, expect)


def test_config_round_trip_and_validation():
    cfg = PreprocessConfig(pad=1, clahe_tiles=(2, 3))
    assert PreprocessConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        PreprocessConfig(median_kernel=2)
    with pytest.raises(ConfigError):
        PreprocessConfig(clahe_clip_limit=1.0)


def test_golden_fixture_is_byte_stable():
    img = read_image(FIXTURES / "golden_input_32.pgm")
    expected, meta = read_raw_tensor(FIXTURES / "golden_output_32.f64")
    out = run_pipeline(img, GOLDEN_CFG).data
    assert out.shape == tuple(meta["shape"])
    assert out.astype("<f8").tobytes() == (FIXTURES / "golden_output_32.f64").read_bytes()
    assert np.array_equal(out, expected)
