from dataclasses import replace

import numpy as np
import pytest

from fcnlab.data import (ShapesConfig, apply_mask, augment, background_fraction, foreground, generate,
                         load_dataset, load_splits, make_splits, save_dataset)
from fcnlab.errors import GenerationError, ParseError
from fcnlab.losses import IGNORE


@pytest.fixture(scope="module")
def samples():
    return generate(ShapesConfig(), 20)


def test_count_zero():
    assert generate(ShapesConfig(), 0) == []


def test_deterministic(samples):
    again = generate(ShapesConfig(), 20)
    for a, b in zip(samples, again):
        assert np.array_equal(a.image, b.image) and np.array_equal(a.label, b.label)


def test_seed_and_split_change_output():
    a = generate(ShapesConfig(), 1)[0]
    assert not np.array_equal(a.image, generate(ShapesConfig(seed=1), 1)[0].image)
    assert not np.array_equal(a.image, generate(ShapesConfig(), 1, split=1)[0].image)


def test_does_not_fit():
    with pytest.raises(GenerationError):
        generate(ShapesConfig(size=20, radius=(5.0, 12.0)), 1)


def test_value_ranges(samples):
    for s in samples:
        assert s.image.shape == (3, 64, 64) and s.label.shape == (64, 64)
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert np.array_equal(np.round(s.image * 255) / 255, s.image)
        assert set(np.unique(s.label)) <= {0, 1, 2, 3, 4}


def test_labels_match_geometry(samples):
    yy, xx = np.mgrid[0:64, 0:64].astype(float)
    for s in samples:
        expected = np.zeros((64, 64), dtype=np.uint8)
        for shape in s.shapes:                  # back to front
            expected[shape.contains(yy, xx)] = shape.kind
        assert np.array_equal(s.label, expected)
        for k in np.unique(s.label[s.label > 0]):
            inside = np.zeros((64, 64), dtype=bool)
            for shape in s.shapes:
                if shape.kind == k:
                    inside |= shape.contains(yy, xx)
            assert inside[s.label == k].all()


def test_background_fraction_1000():
    frac = background_fraction(generate(ShapesConfig(), 1000))
    assert 0.70 <= frac <= 0.80


def test_splits_sizes():
    splits = make_splits(ShapesConfig(), {"train": 3, "val": 2, "test": 1})
    assert [len(splits[k]) for k in ("train", "val", "test")] == [3, 2, 1]


# -- masks --------------------------------------------------------------------------

def test_mask_none(samples):
    assert apply_mask(samples[0], "none") is samples[0]


def test_fg_then_bg_is_zero(samples):
    s = apply_mask(apply_mask(samples[0], "fg_only"), "bg_only")
    assert not s.image.any()


def test_masks_partition(samples):
    s = samples[1]
    fg, bg = apply_mask(s, "fg_only").image, apply_mask(s, "bg_only").image
    assert np.array_equal(fg + bg, s.image)
    assert np.array_equal(apply_mask(s, "fg_only").label, s.label)


def test_shape_only_binary(samples):
    s = apply_mask(samples[2], "shape_only")
    assert set(np.unique(s.image)) == {0.0, 1.0}
    assert np.array_equal(s.image[0] == 1.0, foreground(samples[2].label))
    assert np.array_equal(s.image[0], s.image[2])


def test_unknown_mask(samples):
    with pytest.raises(ValueError):
        apply_mask(samples[0], "blur")


# -- augmentation -----------------------------------------------------------------------

def test_augment_noop(samples):
    s = augment(samples[0], mirror=False, jitter=0, seed=1)
    assert np.array_equal(s.image, samples[0].image) and np.array_equal(s.label, samples[0].label)


def test_double_mirror(samples):
    once = augment(samples[0], flip=True)
    assert np.array_equal(once.label, samples[0].label[:, ::-1])
    twice = augment(once, flip=True)
    assert np.array_equal(twice.image, samples[0].image)


def test_jitter_vs_coordinate_oracle(samples):
    s = samples[3]
    for seed in range(10):
        out = augment(s, jitter=5, seed=seed)
        rng = np.random.default_rng(seed)
        dy, dx = rng.integers(-5, 6, size=2)
        for i in range(64):
            for j in range(64):
                si, sj = i - dy, j - dx
                if 0 <= si < 64 and 0 <= sj < 64:
                    assert out.label[i, j] == s.label[si, sj]
                    assert np.array_equal(out.image[:, i, j], s.image[:, si, sj])
                else:
                    assert out.label[i, j] == IGNORE and not out.image[:, i, j].any()


def test_mirror_probability(samples):
    flips = sum(not np.array_equal(augment(samples[0], mirror=True, seed=k).label, samples[0].label)
                for k in range(400))
    assert 160 < flips < 240


# -- dataset directories -------------------------------------------------------------------

def test_dataset_round_trip(tmp_path, samples):
    save_dataset(tmp_path / "d", samples[:4])
    back = load_dataset(tmp_path / "d")
    assert len(back) == 4
    for a, b in zip(samples, back):
        assert np.array_equal(a.image, b.image) and np.array_equal(a.label, b.label)


def test_gray_dataset_round_trip(tmp_path, samples):
    gray = [replace(s, image=s.image[:1]) for s in samples[:2]]
    save_dataset(tmp_path / "g", gray)
    assert (tmp_path / "g" / "images" / "0000.pgm").exists()
    back = load_dataset(tmp_path / "g")
    assert np.array_equal(back[1].image, gray[1].image)


def test_ignore_survives(tmp_path, samples):
    s = replace(samples[0], label=samples[0].label.copy())
    s.label[:3] = IGNORE
    save_dataset(tmp_path / "i", [s])
    assert np.array_equal(load_dataset(tmp_path / "i")[0].label, s.label)


def test_missing_manifest(tmp_path):
    with pytest.raises(ParseError):
        load_dataset(tmp_path)


def test_load_splits(tmp_path, samples):
    save_dataset(tmp_path / "train", samples[:2])
    assert list(load_splits(tmp_path)) == ["train"]
