import warnings

import cv2
import numpy as np
import pytest

from mpsi.data import (
    AUG_CODES,
    DatasetManifest,
    PatchSampler,
    augment,
    augment_array,
    bicubic_resize,
    cubic_kernel,
    degrade,
    invert_augment,
    load_image,
    read_manifest,
    resize_weights,
    sample_patch,
    save_image,
    synthetic_image,
    write_manifest,
)
from fractions import Fraction

import oracles


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# --------------------------------------------------------------------- I/O


def test_png_roundtrip_bit_identical(tmp_path, rng):
    codes = rng.integers(0, 256, size=(9, 13, 3), dtype=np.uint8)
    cv2.imwrite(str(tmp_path / "a.png"), codes)
    img = load_image(tmp_path / "a.png")
    assert img.shape == (3, 9, 13)
    save_image(img, tmp_path / "b.png")
    assert np.array_equal(cv2.imread(str(tmp_path / "b.png"), cv2.IMREAD_UNCHANGED), codes)
    assert np.array_equal(img[0], codes[:, :, 2] / 255.0)  # channel 0 is red


def test_black_png_and_16_bit_white(tmp_path):
    cv2.imwrite(str(tmp_path / "k.png"), np.zeros((4, 5, 3), np.uint8))
    assert not load_image(tmp_path / "k.png").any()
    cv2.imwrite(str(tmp_path / "w.png"), np.full((3, 3), 65535, np.uint16))
    assert np.array_equal(load_image(tmp_path / "w.png"), np.ones((3, 3, 3)))


def test_ppm_roundtrip_and_16_bit(tmp_path, rng):
    img = rng.integers(0, 256, size=(3, 5, 4)) / 255.0
    save_image(img, tmp_path / "a.ppm")
    assert np.array_equal(load_image(tmp_path / "a.ppm"), img)
    raw = np.full((2, 2, 3), 65535, dtype=">u2")
    (tmp_path / "b.ppm").write_bytes(b"P6\n# comment\n2 2\n65535\n" + raw.tobytes())
    assert np.array_equal(load_image(tmp_path / "b.ppm"), np.ones((3, 2, 2)))


def test_save_rounds_half_away_from_zero(tmp_path):
    img = np.full((3, 1, 2), 0.0)
    img[:, 0, 0] = 0.5 / 255.0
    img[:, 0, 1] = 1.5 / 255.0
    save_image(img, tmp_path / "r.ppm")
    assert list((tmp_path / "r.ppm").read_bytes()[-6:]) == [1, 1, 1, 2, 2, 2]


def test_io_errors_name_the_path(tmp_path):
    with pytest.raises(IOError, match="missing.png"):
        load_image(tmp_path / "missing.png")
    (tmp_path / "x.jpg").write_bytes(b"\xff\xd8")
    with pytest.raises(IOError, match="x.jpg"):
        load_image(tmp_path / "x.jpg")
    save_image(np.zeros((3, 6, 6)), tmp_path / "t.png")
    (tmp_path / "t.png").write_bytes((tmp_path / "t.png").read_bytes()[:40])
    with pytest.raises(IOError, match="t.png"):
        load_image(tmp_path / "t.png")
    (tmp_path / "t.ppm").write_bytes(b"P6\n4 4\n255\n" + b"\0" * 10)
    with pytest.raises(IOError, match="t.ppm"):
        load_image(tmp_path / "t.ppm")


# ----------------------------------------------------------------- bicubic


def test_cubic_kernel_values():
    assert cubic_kernel(0.0) == 1.0
    assert np.all(cubic_kernel(np.array([-2.0, -1.0, 1.0, 2.0, 3.0])) == 0.0)
    for x in np.linspace(-2.5, 2.5, 41):
        assert cubic_kernel(x) == pytest.approx(oracles.keys_cubic(x), abs=1e-15)


@pytest.mark.parametrize("n_in,scale", [(10, Fraction(1, 2)), (9, Fraction(1, 3)), (7, Fraction(2)), (8, Fraction(3, 2)), (12, Fraction(1, 4))])
def test_weights_sum_to_one(n_in, scale):
    import math

    w = resize_weights(n_in, math.ceil(n_in * scale), scale)
    assert np.abs(w.sum(axis=1) - 1).max() < 1e-12


def test_bicubic_identity_and_constant(rng):
    x = rng.uniform(size=(3, 11, 7))
    assert np.abs(bicubic_resize(x, 1) - x).max() < 1e-12
    c = np.full((3, 12, 9), 0.37)
    for num, den in [(1, 2), (1, 3), (2, 1), (4, 1), (2, 3)]:
        assert np.abs(bicubic_resize(c, num, den) - 0.37).max() < 1e-12


def test_bicubic_downscale_reproduces_ramp_slope():
    ramp = np.tile(0.01 * np.arange(40.0), (3, 10, 1))
    out = bicubic_resize(ramp, 1, 2)
    assert out.shape == (3, 5, 20)
    interior = out[:, :, 3:-3]
    assert np.allclose(np.diff(interior, axis=-1), 0.02, atol=1e-12)
    # half-pixel centering: output pixel j sits at input coordinate 2j + 0.5
    assert np.allclose(interior[0, 2], 0.01 * (2 * np.arange(3, 17) + 0.5), atol=1e-12)


def test_bicubic_upscale_matches_direct_kernel_sum(rng):
    x = rng.uniform(size=(6,))
    out = bicubic_resize(x[None, None, :], 2)[0, 0]
    for j, val in enumerate(out):
        pos = (j + 0.5) / 2 - 0.5
        lo = int(np.floor(pos)) - 1
        acc = sum(oracles.keys_cubic(pos - i) * x[min(max(i, 0), 5)] for i in range(lo, lo + 4))
        assert val == pytest.approx(acc, abs=1e-12)


def test_bicubic_rejects_empty_output():
    with pytest.raises(ValueError):
        bicubic_resize(np.zeros((3, 4, 4)), 0, 1)


# ------------------------------------------------------------ augmentation


def test_rotation_and_flip_group_identities(rng):
    x = rng.normal(size=(3, 5, 5))
    y = x
    for _ in range(4):
        y = augment_array(y, "rot90")
    assert np.array_equal(y, x)
    assert np.array_equal(augment_array(augment_array(x, "rot0+flip"), "rot0+flip"), x)
    assert np.array_equal(augment_array(x, "rot180"), x[..., ::-1, ::-1])


def test_all_codes_invert(rng):
    assert len(AUG_CODES) == 8
    from mpsi.data import PatchPair

    pair = PatchPair(rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 8, 8)), "s", (0, 0), (0, 0))
    for code in AUG_CODES:
        back = invert_augment(augment(pair, code))
        assert np.array_equal(back.lr, pair.lr) and np.array_equal(back.hr, pair.hr)


def test_rotation_needs_square():
    with pytest.raises(ValueError):
        augment_array(np.zeros((3, 4, 5)), "rot90")
    assert augment_array(np.zeros((3, 4, 5)), "rot0+flip").shape == (3, 4, 5)


# ----------------------------------------------------------------- patches


@pytest.fixture
def image_set(tmp_path):
    rng = np.random.default_rng(1)
    paths = []
    for i, (h, w) in enumerate([(40, 36), (33, 50), (10, 10)]):
        p = tmp_path / f"i{i}.png"
        save_image(synthetic_image(rng, h, w), p)
        paths.append(p.name)
    write_manifest(tmp_path / "m.txt", ["# training set"] + paths)
    return tmp_path / "m.txt"


def test_manifest_parsing(image_set):
    m = read_manifest(image_set, scale=2, patch_size=8)
    assert len(m.paths) == 3 and all(p.endswith(".png") for p in m.paths)


def test_small_images_skipped_with_warning(image_set):
    m = read_manifest(image_set, scale=2, patch_size=8)
    with pytest.warns(UserWarning, match="i2.png"):
        s = PatchSampler(m)
    assert len(s.entries) == 2
    with pytest.raises(ValueError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        PatchSampler(DatasetManifest(m.paths, 2, 64))


def test_patch_alignment_and_content(image_set):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = PatchSampler(read_manifest(image_set, scale=3, patch_size=6), augment=False)
    rng = np.random.default_rng(2)
    for _ in range(30):
        pair = sample_patch(s, rng)
        (i, j), (hi, hj) = pair.lr_offset, pair.hr_offset
        assert (hi, hj) == (3 * i, 3 * j)
        assert pair.lr.shape == (3, 6, 6) and pair.hr.shape == (3, 18, 18)
        entry = next(e for e in s.entries if e.source == pair.source)
        assert np.array_equal(pair.hr, entry.hr[:, hi : hi + 18, hj : hj + 18])
        assert np.array_equal(pair.lr, degrade(entry.hr, 3)[:, i : i + 6, j : j + 6])


def test_sampling_deterministic(image_set):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = PatchSampler(read_manifest(image_set, scale=2, patch_size=8))
    a = s.batch(np.random.default_rng(5), 6)
    b = s.batch(np.random.default_rng(5), 6)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert [p.provenance() for p in a[2]] == [p.provenance() for p in b[2]]


def test_augmented_patch_inverts_to_plain_crop(image_set):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = PatchSampler(read_manifest(image_set, scale=2, patch_size=8), augment=True)
    rng = np.random.default_rng(7)
    for _ in range(20):
        pair = s.sample(rng)
        plain = invert_augment(pair)
        entry = next(e for e in s.entries if e.source == pair.source)
        hi, hj = pair.hr_offset
        assert np.array_equal(plain.hr, entry.hr[:, hi : hi + 16, hj : hj + 16])


def test_synthetic_image_range_and_determinism():
    a = synthetic_image(np.random.default_rng(3), 20, 30)
    b = synthetic_image(np.random.default_rng(3), 20, 30)
    assert a.shape == (3, 20, 30) and np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1
