import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dust.data import (MIN_CLASS_FRACTION, N_CLASSES, Dataset, DatasetManifest, augment, center_crop, generate,
                       generate_sample, preprocess, read_pgm, write_pgm)

COUNTS = {"labeled": 2, "unlabeled": 3, "val": 1, "test": 2}


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate(root, COUNTS, seed=5)
    return root


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generation_is_byte_identical(dataset_dir, tmp_path):
    generate(tmp_path, COUNTS, seed=5)
    assert _tree_bytes(tmp_path) == _tree_bytes(dataset_dir)


def test_manifest_contents(dataset_dir):
    m = DatasetManifest.from_json(json.loads((dataset_dir / "manifest.json").read_text()))
    assert m.counts == COUNTS
    assert len(m.samples) == sum(COUNTS.values())
    ids = [s["id"] for s in m.samples]
    assert len(set(ids)) == len(ids)
    split_ids = [set(m.ids(s)) for s in COUNTS]
    assert set().union(*split_ids) == set(ids)
    assert sum(len(s) for s in split_ids) == len(ids)
    assert all(0 <= s["difficulty"] <= 1 for s in m.samples)


def test_file_formats(dataset_dir):
    img = (dataset_dir / "images" / "s0000.pgm").read_bytes()
    mask = (dataset_dir / "masks" / "s0000.pgm").read_bytes()
    assert img.startswith(b"P5\n80 80\n65535\n") and len(img) == 15 + 80 * 80 * 2
    assert mask.startswith(b"P5\n80 80\n255\n") and len(mask) == 13 + 80 * 80
    assert read_pgm(dataset_dir / "images" / "s0000.pgm").dtype == np.uint16


def test_adding_samples_keeps_existing_ones():
    a = generate_sample(9, 3, "x", "labeled")
    b = generate_sample(9, 3, "x", "test")
    assert a.image.tobytes() == b.image.tobytes() and a.difficulty == b.difficulty
    assert generate_sample(9, 4, "y", "labeled").image.tobytes() != a.image.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 500))
def test_every_class_present(seed, index):
    s = generate_sample(seed, index, "s", "labeled")
    counts = np.bincount(s.mask.ravel(), minlength=N_CLASSES)
    assert counts.size == N_CLASSES
    assert np.all(counts[1:] >= MIN_CLASS_FRACTION * s.mask.size)
    # structures stay inside the default 64x64 center crop
    assert np.array_equal(np.bincount(center_crop(s.mask, 64).ravel(), minlength=N_CLASSES)[1:], counts[1:])


def test_zero_difficulty_is_piecewise_constant():
    s = generate_sample(1, 0, "s", "labeled", difficulty=0.0)
    # background splits into outside/inside the body disk; each class is one level
    for cls in (1, 2, 3):
        assert np.unique(s.image[s.mask == cls]).size == 1
    assert np.unique(s.image[s.mask == 0]).size <= 2


def test_noise_grows_with_difficulty():
    def residual(d):
        s = generate_sample(2, 0, "s", "labeled", difficulty=d)
        return np.unique(s.image[s.mask == 3]).size, s.image[s.mask == 3].astype(float).std()
    assert residual(0.0)[0] == 1
    assert residual(0.3)[1] < residual(0.9)[1]


def test_bad_size_and_counts(tmp_path):
    with pytest.raises(ValueError, match="divisible"):
        generate(tmp_path, COUNTS, size=63)
    with pytest.raises(ValueError):
        generate(tmp_path, {"labeled": 0, "unlabeled": 3})


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 100), st.floats(-100, 100))
def test_preprocess_standardizes_and_is_affine_invariant(seed, a, b):
    x = np.random.default_rng(seed).random((16, 16))
    y = preprocess(x)
    assert abs(y.mean()) < 1e-5 and abs(y.std() - 1) < 1e-4
    np.testing.assert_allclose(preprocess(a * x + b), y, atol=1e-5)


def test_preprocess_constant_image():
    assert not np.any(preprocess(np.full((4, 4), 7.0)))


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    for dtype in (np.uint8, np.uint16):
        a = rng.integers(0, np.iinfo(dtype).max, (5, 7)).astype(dtype)
        write_pgm(tmp_path / "a.pgm", a)
        b = read_pgm(tmp_path / "a.pgm")
        assert b.dtype == dtype and np.array_equal(a, b)


class _Scripted:
    """Stands in for a Generator, replaying a fixed draw sequence."""

    def __init__(self, flips, ints):
        self.flips, self.ints = list(flips), list(ints)

    def random(self):
        return self.flips.pop(0)

    def integers(self, n):
        return self.ints.pop(0)


def test_identity_draw_only_crops():
    img = np.arange(100.0).reshape(10, 10)
    mask = (img % 4).astype(np.int64)
    out_i, out_m = augment(img, mask, _Scripted([0.9, 0.9], [0, 2, 2]), 6)
    np.testing.assert_array_equal(out_i, center_crop(img, 6))
    np.testing.assert_array_equal(out_m, center_crop(mask, 6))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_augment_same_transform_for_image_and_mask(seed):
    img = np.random.default_rng(seed).random((12, 12))
    # the mask encodes each pixel's identity, so image and mask must move together
    mask = np.arange(144).reshape(12, 12)
    lookup = dict(zip(mask.ravel(), img.ravel()))
    out_i, out_m = augment(img, mask, np.random.default_rng(seed), 8)
    assert out_i.shape == (8, 8)
    np.testing.assert_array_equal(out_i, np.vectorize(lookup.get)(out_m))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_full_size_augment_preserves_class_counts(seed):
    mask = np.random.default_rng(seed).integers(0, 4, (10, 10))
    _, out = augment(mask.astype(float), mask, np.random.default_rng(seed), 10)
    np.testing.assert_array_equal(np.bincount(out.ravel(), minlength=4), np.bincount(mask.ravel(), minlength=4))


def test_augment_deterministic_given_rng():
    img = np.random.default_rng(0).random((10, 10))
    a = augment(img, img.astype(int), np.random.default_rng(3), 6)
    b = augment(img, img.astype(int), np.random.default_rng(3), 6)
    np.testing.assert_array_equal(a[0], b[0])


def test_crop_larger_than_canvas():
    with pytest.raises(ValueError):
        augment(np.zeros((4, 4)), np.zeros((4, 4), dtype=int), np.random.default_rng(), 5)
    with pytest.raises(ValueError):
        center_crop(np.zeros((4, 4)), 5)


def test_dataset_loader(dataset_dir):
    ds = Dataset(dataset_dir)
    assert ds.n_classes == 4
    assert ds.ids("test") == ["s0006", "s0007"]
    imgs, masks = ds.stack(ds.ids("test"), 64)
    assert imgs.shape == (2, 1, 64, 64) and imgs.dtype == np.float32
    assert masks.shape == (2, 64, 64)
    with pytest.raises(KeyError):
        ds.stack(["nope"], 64)


def test_dataset_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        Dataset(tmp_path)
