import numpy as np
import pytest
from PIL import Image

from conftest import toy_model
from drought_xai import explain, ingest, synth
from drought_xai.ingest import HEALTHY, STRESSED
from oracles import pixel_relative_errors


def test_ten_per_class_counts(tmp_path):
    scenes = synth.generate_dataset(synth.SynthSpec(n_per_class=10), tmp_path)
    assert sum(len(s.boxes) for s in scenes) == 20
    patches = ingest.extract_corpus(scenes, tmp_path / "patches")
    counts = ingest.class_counts(ingest.split_manifest(patches, 0.2, 42))
    assert counts[("train", HEALTHY)] + counts[("val", HEALTHY)] == 10
    assert counts[("train", STRESSED)] + counts[("val", STRESSED)] == 10


def test_same_seed_byte_identical(tmp_path):
    spec = synth.SynthSpec(n_per_class=6, seed=9)
    synth.generate_dataset(spec, tmp_path / "a")
    synth.generate_dataset(spec, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_boxes_inside_and_disjoint(corpus):
    _, spec, scenes = corpus
    for scene in scenes:
        boxes = scene.boxes
        for b in boxes:
            assert 0 <= b.xmin < b.xmax <= scene.width and 0 <= b.ymin < b.ymax <= scene.height
        for i, a in enumerate(boxes):
            for b in boxes[i + 1:]:
                assert a.xmax <= b.xmin or b.xmax <= a.xmin or a.ymax <= b.ymin or b.ymax <= a.ymin


def test_mean_channel_classifier_on_corpus(corpus, tmp_path):
    _, spec, scenes = corpus
    classify = synth.mean_channel_classifier(spec)
    records = ingest.extract_corpus(scenes, tmp_path)
    correct = [classify(np.asarray(Image.open(r.patch_path)) / 255.0) == r.label for r in records]
    assert np.mean(correct) >= 0.99


def test_separability_on_1000_samples():
    spec = synth.SynthSpec()
    rng = np.random.default_rng(0)
    classify = synth.mean_channel_classifier(spec)
    labels = [HEALTHY, STRESSED] * 500
    hits = [classify(synth.sample_patch(spec, label, rng, (12, 12))) == label for label in labels]
    assert np.mean(hits) >= 0.99


def test_spec_rejects_overlapping_classes():
    with pytest.raises(ValueError):
        synth.SynthSpec(healthy_rgb=(0.5, 0.5, 0.5), stressed_rgb=(0.55, 0.5, 0.5))
    with pytest.raises(ValueError):
        synth.SynthSpec(patch_size=(10, 200))


def test_constant_model_zero_grid(rng):
    grad = synth.brute_force_grad(synth.ConstantModel(), rng.random((5, 5, 3)), pixels="all")
    assert np.all(grad == 0)


def test_linear_probe_analytic(rng):
    w = np.array([1.5, -0.5, 0.25])
    probe = synth.LinearProbe(w, -0.2)
    image = rng.random((4, 6, 3))
    theta = explain.model_output(probe, image)
    expected = np.broadcast_to(w * theta * (1 - theta) / 24, image.shape)
    np.testing.assert_allclose(synth.brute_force_grad(probe, image, pixels="all"), expected, atol=1e-6)


def test_sampled_entries_only(rng):
    grad = synth.brute_force_grad(synth.LinearProbe([1, 1, 1]), rng.random((10, 10, 3)), n_pixels=7)
    assert np.isfinite(grad).all(axis=2).sum() == 7


def test_h_symmetry(rng):
    net = toy_model(seed=4, size=(16, 16))
    image = rng.random((16, 16, 3))
    a = synth.brute_force_grad(net, image, h=1e-4, n_pixels=10)
    b = synth.brute_force_grad(net, image, h=-1e-4, n_pixels=10)
    mask = np.isfinite(a)
    assert np.max(np.abs(a[mask] - b[mask])) < 1e-9


def test_toy_cnn_against_autodiff(rng):
    net = toy_model(seed=5, size=(16, 16))
    image = rng.random((16, 16, 3))
    pixels = synth.sample_pixels(image.shape, 100, 1)
    numeric = synth.brute_force_grad(net, image, pixels=pixels)
    assert pixel_relative_errors(explain.input_gradient_saliency(net, image), numeric, pixels).max() < 1e-3


def test_sample_pixels_distinct_and_reproducible():
    a = synth.sample_pixels((10, 10), 50, 3)
    assert len({tuple(p) for p in a}) == 50
    assert np.array_equal(a, synth.sample_pixels((10, 10), 50, 3))
