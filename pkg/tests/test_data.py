import filecmp
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from iaunet.data import (AugmentationConfig, HardNegativePool, SampleRecord, SynthConfig,
                         TripletSampler, augment, build_triplets, generate_synthetic,
                         load_dataset, read_image, read_mask, write_image, write_mask)
from iaunet.data.synth import ellipse_mask, load_cells
from iaunet.errors import ConfigurationError, DataValidationError


def _write_manifest(root, entries):
    (root / "m.json").write_text(json.dumps(entries))
    return root / "m.json"


def _pair(root, name, shape=(32, 32), mask_shape=None, mask_value=255):
    write_image(root / f"{name}.png", np.zeros(shape + (3,), np.uint8))
    m = np.zeros(mask_shape or shape, np.uint8)
    m[0, 0] = mask_value
    Image.fromarray(m, mode="L").save(root / f"{name}_m.png")
    return {"image": f"{name}.png", "mask": f"{name}_m.png", "identity": "0"}


def test_load_valid_manifest(tmp_path):
    path = _write_manifest(tmp_path, [_pair(tmp_path, f"r{i}") for i in range(3)])
    recs = load_dataset(path)
    assert len(recs) == 3 and all(isinstance(r, SampleRecord) for r in recs)
    assert recs[0].record_id == "r0.png"


def test_manifest_dimension_mismatch_names_path(tmp_path):
    path = _write_manifest(tmp_path, [_pair(tmp_path, "a", shape=(64, 32), mask_shape=(64, 64))])
    with pytest.raises(DataValidationError, match="a_m.png"):
        load_dataset(path)


def test_manifest_non_binary_mask(tmp_path):
    path = _write_manifest(tmp_path, [_pair(tmp_path, "a", mask_value=7)])
    with pytest.raises(DataValidationError, match="a_m.png"):
        load_dataset(path)
    assert load_dataset(path, binary=False)[0].identity_id == "0"


def test_manifest_missing_file_and_duplicates(tmp_path):
    entry = _pair(tmp_path, "a")
    path = _write_manifest(tmp_path, [entry, dict(entry)])
    with pytest.raises(DataValidationError, match="duplicate"):
        load_dataset(path)
    path = _write_manifest(tmp_path, [{"image": "nope.png", "mask": "nope_m.png", "identity": "0"}])
    with pytest.raises(DataValidationError, match="nope.png"):
        load_dataset(path)
    with pytest.raises(DataValidationError):
        load_dataset(tmp_path / "absent.json")


def test_image_and_mask_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (16, 24, 3), dtype=np.uint8)
    write_image(tmp_path / "i.png", img)
    assert np.array_equal(read_image(tmp_path / "i.png"), img)
    mask = rng.random((16, 24)) > 0.5
    write_mask(tmp_path / "m.png", mask)
    back = read_mask(tmp_path / "m.png")
    assert back.dtype == np.float32 and set(np.unique(back)) <= {0.0, 1.0}
    assert np.array_equal(back.astype(bool), mask)
    classes = rng.integers(0, 4, (8, 8))
    write_mask(tmp_path / "c.png", classes, binary=False)
    assert np.array_equal(read_mask(tmp_path / "c.png", binary=False), classes)


def test_sixteen_bit_input_is_rejected(tmp_path):
    Image.fromarray(np.zeros((4, 4), np.uint16) + 300).save(tmp_path / "deep.png")
    with pytest.raises(DataValidationError, match="bit depth"):
        read_mask(tmp_path / "deep.png")
    with pytest.raises(DataValidationError, match="bit depth"):
        read_image(tmp_path / "deep.png")


def _rec(name, ident, tags=()):
    return SampleRecord(name, None, ident, list(tags), record_id=name)


def test_forced_pool_branch():
    recs = [_rec("a1", "A"), _rec("a2", "A"), _rec("b1", "B")]
    pool = HardNegativePool([_rec("p1", "background", ["background"])])
    stream = build_triplets(recs, pool, hard_negative_prob=1.0, rng_seed=3)
    assert all(next(stream).negative_source == "pool" for _ in range(50))


def test_forced_cross_identity_branch():
    recs = [_rec("a1", "A"), _rec("a2", "A"), _rec("b1", "B"), _rec("b2", "B")]
    stream = build_triplets(recs, HardNegativePool([_rec("p", "x")]), 0.0, rng_seed=3)
    for _ in range(50):
        t = next(stream)
        assert t.negative.identity_id != t.anchor.identity_id and t.negative_source != "pool"
        assert t.positive is not t.anchor


def test_pool_fraction_matches_probability():
    recs = [_rec("a1", "A"), _rec("b1", "B")]
    pool = HardNegativePool([_rec("p1", "bg"), _rec("p2", "bg")])
    stream = build_triplets(recs, pool, hard_negative_prob=0.3, rng_seed=0)
    frac = np.mean([next(stream).negative_source == "pool" for _ in range(10_000)])
    assert abs(frac - 0.3) <= 0.02


def test_single_identity_without_pool_is_configuration_error():
    with pytest.raises(ConfigurationError):
        TripletSampler([_rec("a", "A"), _rec("b", "A")], None, 0.5)


def test_triplet_stream_is_deterministic_and_sharded():
    recs = [_rec(f"r{i}", "AB"[i % 2]) for i in range(6)]

    def draw(seed, shard=0):
        s = build_triplets(recs, None, 0.0, rng_seed=seed, shard=shard)
        return [(t.positive.record_id, t.negative.record_id) for t in (next(s) for _ in range(30))]

    assert draw(5) == draw(5)
    assert draw(5, shard=1) == draw(6)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 3), st.floats(0, 1),
       st.integers(0, 2**31))
def test_triplet_identity_invariants(n_ident, per_ident, pool_size, prob, seed):
    recs = [_rec(f"{i}_{j}", str(i)) for i in range(n_ident) for j in range(per_ident)]
    pool = HardNegativePool([_rec(f"p{k}", "bg") for k in range(pool_size)])
    if n_ident < 2 and not pool_size:
        with pytest.raises(ConfigurationError):
            TripletSampler(recs, pool, prob)
        return
    stream = build_triplets(recs, pool, prob, rng_seed=seed)
    for _ in range(1000 // 20):
        t = next(stream)
        assert t.anchor.identity_id == t.positive.identity_id
        assert t.anchor.identity_id != t.negative.identity_id
        if per_ident > 1:
            assert t.positive is not t.anchor


def test_identity_augmentation_is_noop(rng):
    img = rng.random((3, 16, 16)).astype(np.float32)
    mask = (rng.random((16, 16)) > 0.5).astype(np.float32)
    out, m = augment(img, mask, AugmentationConfig.identity(), rng)
    assert np.array_equal(out, img) and np.array_equal(m, mask)


def test_double_flip_is_involution(rng):
    cfg = AugmentationConfig.identity()
    cfg.flip_prob = 1.0
    img = rng.random((3, 8, 12)).astype(np.float32)
    mask = (rng.random((8, 12)) > 0.5).astype(np.float32)
    once, m1 = augment(img, mask, cfg, rng)
    assert np.array_equal(once, img[:, ::-1, ::-1])
    twice, m2 = augment(once, m1, cfg, rng)
    assert np.array_equal(twice, img) and np.array_equal(m2, mask)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.booleans())
def test_augmentation_preserves_labels_and_shape(seed, multiclass):
    rng = np.random.default_rng(seed)
    img = rng.random((3, 32, 32)).astype(np.float32)
    if multiclass:
        mask = rng.integers(0, 3, (32, 32)).astype(np.int64)
    else:
        mask = (rng.random((32, 32)) > 0.5).astype(np.float32)
    out, m = augment(img, mask, AugmentationConfig(), rng)
    assert out.shape == img.shape and m.shape == mask.shape
    assert set(np.unique(m)) <= set(np.unique(mask)) | {0}
    assert out.min() >= 0 and out.max() <= 1


def test_pure_translation_moves_mask_rigidly(rng):
    # integer shift: foreground count changes only through pixels leaving the frame
    cfg = AugmentationConfig(flip_prob=0, rotation_deg=0, scale_min=1, scale_max=1,
                             translate_frac=0.25, brightness=0, contrast=0)
    mask = np.zeros((32, 32), np.float32)
    mask[12:20, 12:20] = 1
    img = np.zeros((3, 32, 32), np.float32)
    _, m = augment(img, mask, cfg, rng)
    assert m.sum() <= mask.sum()
    ys, xs = np.nonzero(m)
    assert ys.max() - ys.min() <= 8 and xs.max() - xs.min() <= 8


def test_synthetic_generation_is_deterministic(tmp_path):
    cfg = SynthConfig(num_images=4, seed=11)
    generate_synthetic(cfg, tmp_path / "a")
    generate_synthetic(cfg, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in ("images", "masks", "pool"):
        sc = filecmp.dircmp(tmp_path / "a" / sub, tmp_path / "b" / sub)
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / sub, tmp_path / "b" / sub,
                                               sc.common_files, shallow=False)
        assert not mismatch and not errors


def test_masks_equal_rasterized_target_ellipses(synth_dir, records):
    scenes = load_cells(synth_dir)
    size = 64
    for rec, cells in zip(records, scenes):
        expected = np.zeros((size, size), bool)
        for c in cells:
            if c.texture == 0:
                expected |= ellipse_mask(size, c)
        assert np.array_equal(read_mask(rec.mask_path).astype(bool), expected)


def test_touching_scenes_have_overlapping_cells(tmp_path):
    result = generate_synthetic(SynthConfig(num_images=6, touching_prob=1.0, seed=2), tmp_path)
    for cells in result.cells:
        masks = [ellipse_mask(64, c) for c in cells]
        assert any((masks[i] & masks[j]).any()
                   for i in range(len(masks)) for j in range(i + 1, len(masks)))


def test_default_foreground_fraction_band(synth_dir, records):
    fracs = [read_mask(r.mask_path).mean() for r in records]
    assert 0.05 <= min(fracs) and max(fracs) <= 0.40


def test_pool_has_no_target_identity(pool):
    assert len(pool) > 0 and all(r.identity_id != "0" for r in pool)


@pytest.mark.parametrize("kwargs", [{"image_size": 40}, {"num_images": 0},
                                    {"min_cells": 5, "max_cells": 4}, {"identity_count": 1}])
def test_synth_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        SynthConfig(**kwargs)
