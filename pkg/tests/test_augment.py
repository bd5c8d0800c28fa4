from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from conftest import write_png
from drought_xai import ingest
from drought_xai.augment import (
    AugmentationPolicy,
    BatchSpec,
    BatchStream,
    TransformParams,
    apply_transform,
    batch_stream,
    load_image,
    sample_transform,
)
from drought_xai.ingest import HEALTHY, STRESSED, BoundingBox, PatchRecord

params_strategy = st.builds(
    TransformParams,
    rotation_deg=st.floats(-30, 30), shear=st.floats(-0.2, 0.2), dx=st.floats(-6, 6), dy=st.floats(-6, 6),
    flip_horizontal=st.booleans(), flip_vertical=st.booleans(),
)


def records(tmp_path, n, size=(12, 10)):
    rng = np.random.default_rng(n)
    out = []
    for i in range(n):
        label = STRESSED if i % 3 else HEALTHY
        path = write_png(tmp_path / label / f"{i:04d}.png", rng.integers(0, 256, (*size, 3)))
        out.append(PatchRecord(path, label, tmp_path / "s.png", BoundingBox(label, 0, 0, size[1], size[0])))
    return out


# -- policy and sampling


def test_policy_defaults():
    p = AugmentationPolicy()
    assert (p.rescale, p.shear_range, p.rotation_range_deg) == (1 / 255, 0.2, 30)
    assert (p.width_shift_range, p.height_shift_range, p.fill_mode) == (0.2, 0.2, "nearest")
    assert p.horizontal_flip and p.vertical_flip
    spec = BatchSpec()
    assert (spec.target_size, spec.batch_size, spec.class_mode) == ((224, 224), 128, "binary")


@pytest.mark.parametrize("kwargs", [{"shear_range": -0.1}, {"rescale": 0}, {"fill_mode": "reflect"}])
def test_policy_validation(kwargs):
    with pytest.raises(ValueError):
        AugmentationPolicy(**kwargs)


def test_zero_policy_is_identity():
    rng = np.random.default_rng(0)
    for _ in range(100):
        params = sample_transform(AugmentationPolicy.identity(), rng, (224, 224))
        assert params == TransformParams()


def test_sampling_ranges_monte_carlo():
    rng = np.random.default_rng(1)
    draws = [sample_transform(AugmentationPolicy(), rng, (200, 100)) for _ in range(10_000)]
    assert max(abs(d.rotation_deg) for d in draws) <= 30
    assert max(abs(d.shear) for d in draws) <= 0.2
    assert max(abs(d.dx) for d in draws) / 100 <= 0.2
    assert max(abs(d.dy) for d in draws) / 200 <= 0.2
    # the ranges are actually used, not just respected
    assert max(abs(d.rotation_deg) for d in draws) > 29.9
    flips = np.mean([d.flip_horizontal for d in draws])
    assert abs(flips - 0.5) < 0.03


def test_sampling_is_deterministic():
    a = sample_transform(AugmentationPolicy(), np.random.default_rng(5), (64, 64))
    b = sample_transform(AugmentationPolicy(), np.random.default_rng(5), (64, 64))
    assert a == b


# -- transforms


def test_identity_transform_is_bit_identical(rng):
    image = rng.random((9, 7, 3)).astype(np.float32)
    out = apply_transform(image, TransformParams())
    assert out.dtype == image.dtype and np.array_equal(out, image)


def test_horizontal_flip_involution(rng):
    image = rng.integers(0, 256, (8, 6, 3)).astype(np.uint8)
    flip = TransformParams(flip_horizontal=True)
    assert np.array_equal(apply_transform(apply_transform(image, flip), flip), image)
    assert np.array_equal(apply_transform(image, flip), image[:, ::-1])


def test_integer_shift_replicates_edges():
    image = np.arange(25, dtype=float).reshape(5, 5)
    out = apply_transform(image, TransformParams(dx=2))
    np.testing.assert_allclose(out[:, 2:], image[:, :3])
    np.testing.assert_allclose(out[:, :2], np.repeat(image[:, :1], 2, axis=1))


def test_quarter_turn_matches_rot90():
    image = np.arange(49, dtype=float).reshape(7, 7)
    # positive angles turn content clockwise in row-down image coordinates
    np.testing.assert_allclose(apply_transform(image, TransformParams(rotation_deg=90)), np.rot90(image, -1),
                               atol=1e-9)


def test_unsupported_fill():
    with pytest.raises(ValueError):
        apply_transform(np.zeros((3, 3)), TransformParams(dx=1), fill="constant")


@settings(max_examples=50, deadline=None)
@given(params_strategy, st.integers(0, 2**32 - 1))
def test_transform_preserves_shape_dtype_and_range(params, seed):
    image = np.random.default_rng(seed).random((12, 10, 3)).astype(np.float32)
    out = apply_transform(image, params)
    assert out.shape == image.shape and out.dtype == image.dtype
    assert out.min() >= image.min() - 1e-6 and out.max() <= image.max() + 1e-6


@settings(max_examples=50, deadline=None)
@given(st.booleans(), st.booleans(), st.integers(0, 2**32 - 1))
def test_flip_is_a_permutation(h, v, seed):
    image = np.random.default_rng(seed).integers(0, 256, (6, 5, 3)).astype(np.uint8)
    out = apply_transform(image, TransformParams(flip_horizontal=h, flip_vertical=v))
    assert Counter(out.reshape(-1).tolist()) == Counter(image.reshape(-1).tolist())


# -- streaming


def test_batch_sizes_for_300_records(tmp_path):
    recs = records(tmp_path, 1)
    stream = BatchStream(recs * 300, None, BatchSpec((4, 4), 128, shuffle=False))
    assert len(stream) == 3
    assert [len(y) for _, y in stream] == [128, 128, 44]


def test_stream_labels_and_range(tmp_path):
    recs = records(tmp_path, 7)
    for x, y in batch_stream(recs, AugmentationPolicy(seed=1), BatchSpec((16, 16), 3)):
        assert x.shape[1:] == (16, 16, 3) and x.dtype == np.float32
        assert x.min() >= 0 and x.max() <= 1
        assert set(y.tolist()) <= {0.0, 1.0}
    labels = np.concatenate([y for _, y in BatchStream(recs, None, BatchSpec((16, 16), 4, shuffle=False))])
    assert labels.tolist() == [1.0 if r.label == STRESSED else 0.0 for r in recs]


def test_epoch_covers_every_record_once(tmp_path):
    recs = records(tmp_path, 11)
    for epoch in range(3):
        plan = BatchStream(recs, AugmentationPolicy(), BatchSpec((8, 8), 4), seed=3, epoch=epoch).plan()
        assert sorted(str(r.patch_path) for r, _ in plan) == sorted(str(r.patch_path) for r in recs)


def test_shuffle_changes_with_epoch_not_with_rerun(tmp_path):
    recs = records(tmp_path, 20)
    spec = BatchSpec((8, 8), 4)
    first = BatchStream(recs, None, spec, seed=1, epoch=0).order()
    assert first == BatchStream(recs, None, spec, seed=1, epoch=0).order()
    assert first != BatchStream(recs, None, spec, seed=1, epoch=1).order()


def test_val_stream_is_pure_resize_and_rescale(tmp_path):
    recs = records(tmp_path, 5)
    x, _ = next(iter(BatchStream(recs, None, BatchSpec((20, 16), 5, shuffle=False))))
    for image, r in zip(x, recs):
        with Image.open(r.patch_path) as im:
            ref = np.asarray(im.convert("RGB").resize((16, 20), Image.BILINEAR), dtype=np.float32)
        np.testing.assert_array_equal(image, ref * np.float32(1 / 255))


def test_val_stream_enumerated_twice(tmp_path):
    recs = records(tmp_path, 9)
    stream = BatchStream(recs, None, BatchSpec((8, 8), 4), seed=42)
    assert [y.tolist() for _, y in stream] == [y.tolist() for _, y in stream]


def test_unreadable_images_are_skipped(tmp_path):
    recs = records(tmp_path, 3)
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"junk")
    recs.append(PatchRecord(bad, HEALTHY, bad, BoundingBox(HEALTHY, 0, 0, 1, 1)))
    stream = BatchStream(recs, None, BatchSpec((8, 8), 10, shuffle=False))
    (x, y), = list(stream)
    assert len(y) == 3 and stream.skipped == 1


def test_empty_partition_rejected():
    with pytest.raises(ValueError):
        BatchStream([], None, BatchSpec())


def test_load_image_reports_missing_file(tmp_path):
    with pytest.raises(ingest.ImageReadError):
        load_image(tmp_path / "nope.png", (4, 4))
