import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from conftest import toy_model, write_png
from drought_xai import explain, synth
from drought_xai.errors import ConstantMapWarning, LayerNotFound, NonFiniteGradient, ShapeMismatch, WriteError
from drought_xai.model import save_weights
from oracles import occlusion_drops, saliency_errors, top_quartile_overlap

maps = hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=2, max_side=24),
                  elements=st.floats(0, 1e3))


def test_constant_model_gives_zero_gradient(rng):
    grad = explain.input_gradient_saliency(synth.ConstantModel(0.3), rng.random((8, 8, 3)))
    assert grad.shape == (8, 8, 3) and np.all(grad == 0)


def test_linear_probe_gradient_is_uniform_and_proportional(rng):
    w = np.array([2.0, -1.0, 0.5])
    probe = synth.LinearProbe(w, 0.1)
    image = rng.random((6, 5, 3))
    grad = explain.input_gradient_saliency(probe, image)
    theta = explain.model_output(probe, image)
    expected = w * theta * (1 - theta) / (6 * 5)
    np.testing.assert_allclose(grad, np.broadcast_to(expected, grad.shape), rtol=1e-12)


def test_toy_saliency_matches_finite_differences(rng):
    errors = saliency_errors(toy_model(seed=1), rng.random((64, 64, 3)), n=30)
    assert errors.max() < 1e-3


def test_saliency_shape_checks(toy):
    with pytest.raises(ShapeMismatch):
        explain.input_gradient_saliency(toy, np.zeros((32, 32, 3)))
    with pytest.raises(ShapeMismatch):
        explain.input_gradient_saliency(toy, np.zeros((64, 64)))


def test_non_finite_gradient(rng):
    probe = synth.LinearProbe([np.inf, 0.0, 0.0])
    with pytest.raises(NonFiniteGradient):
        explain.input_gradient_saliency(probe, rng.random((4, 4, 3)))


def test_reduce_example():
    grad = np.zeros((2, 2, 3))
    grad[0, 0] = [0.6, -0.6, 0.0]
    heat = explain.reduce_and_rectify(grad)
    assert heat.shape == (2, 2)
    assert heat[0, 0] == pytest.approx(2 * 0.6 / 3)
    assert np.all(explain.reduce_and_rectify(np.zeros((3, 3, 3))) == 0)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (5, 4, 3), elements=st.floats(-1e6, 1e6)))
def test_rectified_map_non_negative(grad):
    assert np.all(explain.reduce_and_rectify(grad) >= 0)


def test_standardize_example():
    s = explain.standardize(np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_allclose(s.values, [[-1.224744871, 0.0, 1.224744871]], atol=1e-8)
    assert s.standardized


def test_standardize_constant_map_warns():
    with pytest.warns(ConstantMapWarning):
        s = explain.standardize(np.full((4, 4), 7.0))
    assert np.all(s.values == 0) and s.standardized


@settings(max_examples=100, deadline=None)
@given(maps)
def test_standardized_moments(h):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConstantMapWarning)
        s = explain.standardize(h)
    if h.std() < 1e-12:
        assert np.all(s.values == 0)
        return
    # the 1e-8 in the denominator shifts std by ~1e-8/sigma; keep sigma well above that
    if h.std() > 0.1:
        assert abs(s.values.mean()) < 1e-6
        assert abs(s.values.std() - 1) < 1e-6


@settings(max_examples=50, deadline=None)
@given(maps, st.floats(1e-2, 1e4))
def test_standardization_scale_invariance(h, a):
    # exact up to the 1e-8 denominator term, whose effect is ~|z| * 1e-8 / sigma
    if h.std() * min(a, 1) < 1.0:
        return
    np.testing.assert_allclose(explain.standardize(a * h).values, explain.standardize(h).values, atol=1e-6)


# -- rendering


def test_render_layout_and_determinism(tmp_path, rng):
    image = rng.random((224, 224, 3))
    s = explain.standardize(rng.random((224, 224)))
    out, overlay = explain.render_side_by_side(image, s, tmp_path / "a.png")
    with Image.open(out) as im:
        assert im.size[0] >= 448 and im.size[1] == 224
    with Image.open(overlay) as im:
        assert im.size == (224, 224)
    again, _ = explain.render_side_by_side(image, s, tmp_path / "b.png")
    assert out.read_bytes() == again.read_bytes()


def test_zero_map_renders_uniform_panel(tmp_path, rng):
    with pytest.warns(ConstantMapWarning):
        s = explain.standardize(np.zeros((16, 16)))
    out, _ = explain.render_side_by_side(rng.random((16, 16, 3)), s, tmp_path / "z.png")
    right = np.asarray(Image.open(out))[:, 16:]
    assert len(np.unique(right.reshape(-1, 3), axis=0)) == 1


def test_render_requires_standardized(tmp_path):
    with pytest.raises(ValueError):
        explain.render_side_by_side(np.zeros((4, 4, 3)), explain.SaliencyMap(np.zeros((4, 4))), tmp_path / "x.png")


def test_render_write_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    s = explain.standardize(np.arange(16.0).reshape(4, 4))
    with pytest.raises(WriteError):
        explain.render_side_by_side(np.zeros((4, 4, 3)), s, blocker / "x.png")


def test_heatmap_text_round_trip(tmp_path, rng):
    values = rng.normal(size=(7, 5))
    back = explain.read_heatmap_text(explain.write_heatmap_text(values, tmp_path / "h.txt"))
    np.testing.assert_allclose(back, values, rtol=1e-8)


def test_explain_image_writes_artifacts(tmp_path, rng):
    net = toy_model(double=False)
    image = write_png(tmp_path / "leaf.png", rng.integers(0, 256, (80, 70, 3)))
    s = explain.explain_image(net, image, tmp_path / "out")
    assert s.values.shape == (64, 64) and s.standardized and 0 < s.model_output < 1
    assert (tmp_path / "out" / "saliency" / "leaf.png").exists()
    assert (tmp_path / "out" / "saliency" / "leaf_overlay.png").exists()
    np.testing.assert_allclose(explain.read_heatmap_text(tmp_path / "out" / "heatmap.txt"), s.values, atol=1e-8)


# -- Grad-CAM


def test_gradcam_zero_when_output_ignores_layer(toy, rng):
    with torch.no_grad():
        for layer in toy.head.dense:
            layer.weight.zero_()
    assert np.all(explain.gradcam_last_conv(toy, rng.random((64, 64, 3))) == 0)


def test_gradcam_single_channel_is_rectified_feature_map(rng):
    net = toy_model(seed=2, feature_dim=1)
    with torch.no_grad():
        for layer in (*net.head.dense, net.head.output):
            layer.weight.copy_(layer.weight.abs())
            layer.bias.fill_(0.1)
    image = rng.random((64, 64, 3))
    cam = explain.gradcam_feature_map(net, image)
    with torch.no_grad():
        fmap = net.feature_map(torch.from_numpy(image).permute(2, 0, 1)[None])[0, 0].numpy()
    relu = np.maximum(fmap, 0)
    assert relu.max() > 0
    ratio = cam[relu > 0] / relu[relu > 0]
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-9)
    assert ratio[0] > 0


def test_gradcam_agrees_with_occlusion(rng):
    informative = 0
    for seed in range(12):
        net = toy_model(seed=seed)
        image = rng.random((64, 64, 3))
        cam = explain.gradcam_feature_map(net, image)
        drops = occlusion_drops(net, image)
        assert cam.shape == drops.shape == (8, 8)
        if np.count_nonzero(cam) >= cam.size // 4:
            informative += 1
            assert top_quartile_overlap(cam, drops) > 0.5
        elif not cam.any():
            # nothing supports the output, and no position's removal lowers it
            assert drops.max() <= 0
    assert informative >= 3


def test_gradcam_upsampled_to_input(toy, rng):
    assert explain.gradcam_last_conv(toy, rng.random((64, 64, 3))).shape == (64, 64)


def test_gradcam_unknown_layer(toy):
    with pytest.raises(LayerNotFound):
        explain.gradcam_feature_map(toy, np.zeros((64, 64, 3)), layer="nope")
    with pytest.raises(LayerNotFound):
        explain.gradcam_feature_map(toy, np.zeros((64, 64, 3)), layer="head.output")


def test_explain_from_checkpoint(tmp_path, rng):
    from drought_xai.model import load_model

    net = toy_model(double=False)
    back = load_model(save_weights(net, tmp_path / "w.npz"))
    image = rng.random((64, 64, 3)).astype(np.float32)
    np.testing.assert_array_equal(explain.input_gradient_saliency(back, image),
                                  explain.input_gradient_saliency(net, image))
