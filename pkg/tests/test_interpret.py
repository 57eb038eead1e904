import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hovertrans.data import read_image
from hovertrans.errors import ValidationError
from hovertrans.interpret import (
    COLORMAP,
    Heatmap,
    colorize,
    heatmap,
    heatmap_from_map,
    normalize,
    overlay,
    to_rgb,
    write_overlay,
)
from hovertrans.model import ModelConfig, build_model
from hovertrans.synthetic import make_image


@pytest.fixture(scope="module")
def model():
    # at 64 px the tiny stage-4 map is 2x2, so the heatmap has spatial structure
    return build_model(ModelConfig.tiny(input_side=64), seed=0).eval()


@pytest.fixture(scope="module")
def image():
    return make_image(64, 1, np.random.default_rng(0))


class TestNormalize:
    def test_range(self):
        hm = normalize(np.array([[1.0, 3.0], [2.0, 5.0]]))
        assert hm.values.min() == 0.0 and hm.values.max() == 1.0 and not hm.constant

    def test_constant_flagged(self):
        hm = normalize(np.full((4, 4), 2.5))
        assert hm.constant and np.all(hm.values == 0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 100_000))
    def test_idempotent(self, seed):
        raw = np.random.default_rng(seed).normal(size=(5, 7))
        once = normalize(raw).values
        assert np.array_equal(normalize(once).values, once)


class TestUpsample:
    def test_shape(self):
        assert heatmap_from_map(np.random.default_rng(0).random((4, 4)), 256).values.shape == (256, 256)

    @pytest.mark.parametrize("r,c", [(0, 0), (1, 2), (3, 3), (2, 0)])
    def test_single_cell_locality(self, r, c):
        raw = np.zeros((4, 4))
        raw[r, c] = 1.0
        hm = heatmap_from_map(raw, 256).values
        y, x = np.unravel_index(np.argmax(hm), hm.shape)
        assert r * 64 <= y < (r + 1) * 64 and c * 64 <= x < (c + 1) * 64
        assert hm.max() == 1.0 and hm.min() == 0.0

    def test_constant(self):
        hm = heatmap_from_map(np.ones((4, 4)), 64)
        assert hm.constant and hm.values.shape == (64, 64)


class TestModelHeatmap:
    def test_shape_range_deterministic(self, model, image):
        a, b = heatmap(model, image), heatmap(model, image)
        assert a.values.shape == (64, 64) and not a.constant
        assert a.values.min() == 0.0 and a.values.max() == 1.0
        assert np.array_equal(a.values, b.values)

    def test_default_pre_pool_map(self):
        m = build_model(ModelConfig(), seed=0).eval()
        img = make_image(256, 0, np.random.default_rng(1))
        x = torch.zeros(1, 256, 256, 3)
        with torch.no_grad():
            _, _, fused = m.forward_features(x)
        assert fused[-1].shape[1:3] == (8, 8)
        assert heatmap(m, img).values.shape == (256, 256)

    def test_tiny_32_is_flat(self):
        m = build_model(ModelConfig.tiny(), seed=0).eval()
        assert heatmap(m, make_image(32, 1, np.random.default_rng(0))).constant

    def test_constant_stage4_flagged(self, image):
        m = build_model(ModelConfig.tiny(input_side=64), seed=0).eval()
        with torch.no_grad():
            m.stages[3].conv.compress.weight.zero_()
            m.stages[3].conv.compress.bias.fill_(0.3)
        hm = heatmap(m, image)
        assert hm.constant and np.all(hm.values == 0.5)

    def test_gradcam(self, model, image):
        hm = heatmap(model, image, method="gradcam")
        assert hm.values.shape == (64, 64)
        assert np.array_equal(hm.values, heatmap(model, image, method="gradcam").values)

    def test_bad_inputs(self, model, image):
        with pytest.raises(ValidationError):
            heatmap(model, image, method="rollout")
        with pytest.raises(ValidationError):
            heatmap(model, np.zeros((16, 16, 1), np.uint8))


def _fixture_pair(seed=0):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (20, 30, 1), dtype=np.uint8)
    hm = normalize(rng.random((20, 30)))
    return img, hm


class TestOverlay:
    def test_lut(self):
        assert COLORMAP.shape == (256, 3) and COLORMAP.dtype == np.uint8
        assert tuple(COLORMAP[0]) == (0, 0, 128) and tuple(COLORMAP[255]) == (128, 0, 0)

    def test_alpha_zero(self):
        img, hm = _fixture_pair()
        assert np.array_equal(overlay(img, hm, 0.0), to_rgb(img))

    def test_alpha_one(self):
        img, hm = _fixture_pair()
        assert np.array_equal(overlay(img, hm, 1.0), colorize(hm))

    def test_alpha_half(self):
        img, hm = _fixture_pair(1)
        mid = overlay(img, hm, 0.5).astype(int)
        expected = (to_rgb(img).astype(int) + colorize(hm).astype(int)) / 2
        assert np.abs(mid - expected).max() <= 1

    def test_monotone_in_alpha(self):
        img, hm = _fixture_pair(2)
        lo, hi = to_rgb(img).astype(int), colorize(hm).astype(int)
        prev = lo
        for alpha in np.linspace(0, 1, 11):
            cur = overlay(img, hm, float(alpha)).astype(int)
            step = np.sign(hi - lo)
            assert np.all((cur - prev) * step >= 0)
            prev = cur

    def test_errors(self):
        img, hm = _fixture_pair()
        with pytest.raises(ValidationError):
            overlay(img, hm, 1.5)
        with pytest.raises(ValidationError):
            overlay(img[:10], hm, 0.5)

    def test_write(self, tmp_path, image, model):
        hm = heatmap(model, image)
        png = write_overlay(tmp_path, "sub/synth_00001.png", image, hm, 0.4, "fold0.ckpt", "activation")
        assert png.name == "sub__synth_00001_heatmap.png"
        assert np.array_equal(read_image(png), overlay(image, hm, 0.4))
        meta = json.loads(png.with_suffix(".json").read_text())
        assert meta == {"image_id": "sub/synth_00001.png", "checkpoint_id": "fold0.ckpt", "method": "activation",
                        "alpha": 0.4, "constant": False}

    def test_heatmap_object(self):
        assert Heatmap(np.zeros((2, 2))).constant is False
