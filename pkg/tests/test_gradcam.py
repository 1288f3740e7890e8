import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cxrnet import functional as F
from cxrnet.errors import UsageError
from cxrnet.gradcam import Heatmap, cam_from, export_heatmap, grad_cam, normalize, upsample_bilinear
from cxrnet.models import ModelConfig, ResNet
from cxrnet.tensor import Tensor, no_grad


@pytest.fixture(scope="module")
def model():
    m = ResNet(ModelConfig(depth=38, width=2, input_size=64), seed=0)
    m.forward(np.random.default_rng(0).random((4, 1, 64, 64)).astype(np.float32), training=True)
    return m


def test_single_channel_closed_form():
    a = np.random.default_rng(0).random((1, 3, 3))
    g = np.full((1, 3, 3), 0.25)
    np.testing.assert_allclose(cam_from(a, g), 0.25 * a[0])


def test_negative_weights_on_positive_activations_give_zero_map():
    rng = np.random.default_rng(1)
    a = rng.random((4, 2, 2))
    cam = cam_from(a, -rng.random((4, 2, 2)))
    assert not cam.any()
    assert not normalize(upsample_bilinear(cam, 16)).any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_rendering_ignores_positive_gradient_scale(seed, c):
    rng = np.random.default_rng(seed)
    a, g = rng.random((3, 4, 4)), rng.standard_normal((3, 4, 4))
    r1 = normalize(upsample_bilinear(cam_from(a, g), 32))
    r2 = normalize(upsample_bilinear(cam_from(a, c * g), 32))
    np.testing.assert_allclose(r1, r2, atol=1e-12)


def test_upsampling_keeps_constants_and_same_size_grids():
    np.testing.assert_allclose(upsample_bilinear(np.full((2, 2), 3.0), 9), 3.0)
    g = np.random.default_rng(2).random((5, 5))
    np.testing.assert_allclose(upsample_bilinear(g, 5), g)


def test_peak_prefers_the_inner_rim_of_a_border_plateau():
    grid = np.array([[1.0, 0.0], [0.0, 0.0]])
    hm = Heatmap(grid, normalize(upsample_bilinear(grid, 8)), 0)
    assert hm.peak == (1, 1)


def test_heatmap_shape_and_range(model):
    x = np.random.default_rng(3).random((1, 64, 64)).astype(np.float32)
    hm = grad_cam(model, x, label_index=2, image_ref="a.png")
    assert hm.grid.shape == (2, 2) and hm.rendering.shape == (64, 64)
    assert hm.rendering.min() >= 0 and hm.rendering.max() <= 1
    assert hm.label == 2 and hm.image_ref == "a.png"


def test_logit_and_probability_gradients_render_alike(model):
    x = np.random.default_rng(4).random((1, 1, 64, 64)).astype(np.float32)
    hm = grad_cam(model, x[0], label_index=5)
    with no_grad():
        fmap = model.features(x, training=False).data
    leaf = Tensor(fmap, requires_grad=True)
    prob = F.sigmoid(model.head_logits(leaf, None))
    seed = np.zeros(prob.shape, np.float32)
    seed[0, 5] = 1
    prob.backward(seed)
    grid = cam_from(fmap[0].astype(np.float64), leaf.grad[0].astype(np.float64))
    model.zero_grad()
    np.testing.assert_allclose(normalize(upsample_bilinear(grid, 64)), hm.rendering, atol=1e-5)


def test_label_out_of_range(model):
    with pytest.raises(UsageError):
        grad_cam(model, np.zeros((1, 64, 64), np.float32), label_index=15)


def test_export_writes_grid_and_images(model, tmp_path):
    x = np.random.default_rng(5).random((1, 64, 64)).astype(np.float32)
    hm = grad_cam(model, x)
    paths = export_heatmap(hm, x, tmp_path / "out" / "img")
    rows = paths["grid.csv"].read_text().splitlines()
    np.testing.assert_allclose([[float(v) for v in r.split(",")] for r in rows], hm.grid)
    assert Image.open(paths["cam.png"]).size == (64, 64)
    assert Image.open(paths["overlay.png"]).mode == "RGB"
