import json
import math

import numpy as np
import pytest

from heightlift import render
from heightlift.bev import BevFeatureMap, BevGridSpec
from heightlift.autodiff import Tensor
from heightlift.boxes import Box3D, Detection
from heightlift.config import apply_overrides, config_to_flat, default_config, load_config
from heightlift.errors import ConfigError, ParseError


class TestConfig:
    def test_defaults_are_desk_scale(self):
        cfg = default_config()
        assert (cfg.image.height, cfg.image.width) == (64, 96)
        assert cfg.model.d_model == 32 and cfg.model.n_bins == 16
        assert cfg.bev.resolution == 0.8
        assert cfg.train.lr == 2e-4
        assert cfg.classes == ("Car", "Big-vehicle", "Cyclist")

    def test_flat_round_trip(self):
        cfg = default_config()
        flat = config_to_flat(cfg)
        assert flat["model.d_model"] == 32
        assert flat["bev.x_max"] == 51.2
        again = apply_overrides(default_config(), flat)
        assert config_to_flat(again) == flat

    def test_override_and_coercion(self):
        cfg = apply_overrides(default_config(), {"model.d_model": 16,
                                                 "train.lr": "0.001",
                                                 "classes": ["Car"]})
        assert cfg.model.d_model == 16
        assert cfg.train.lr == 0.001
        assert cfg.classes == ("Car",)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            apply_overrides(default_config(), {"model.banana": 1})
        with pytest.raises(ConfigError):
            apply_overrides(default_config(), {"nosuch.thing": 1})

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"bev.patch_size": 2, "synth.n_cars": 1}))
        cfg = load_config(str(path), overrides={"synth.n_cars": 4})
        assert cfg.bev.patch_size == 2
        assert cfg.synth.n_cars == 4  # explicit override wins

    def test_bad_json_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError):
            load_config(str(path))


class TestPpm:
    def test_header_bytes_exact(self):
        data = render.ppm_encode(np.zeros((4, 6, 3), dtype=np.uint8))
        assert data.startswith(b"P6\n6 4\n255\n")
        assert len(data) == len(b"P6\n6 4\n255\n") + 4 * 6 * 3

    def test_encode_decode_round_trip(self):
        rng = np.random.default_rng(0)
        rgb = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
        assert np.array_equal(render.ppm_decode(render.ppm_encode(rgb)), rgb)

    def test_image_float_round_trip(self):
        rng = np.random.default_rng(1)
        img = rng.random((3, 4, 6))
        back = render.ppm_to_image(render.image_to_ppm(img))
        assert np.max(np.abs(back - img)) <= 0.5 / 255.0 + 1e-12
        # quantized values survive a second round exactly
        assert render.image_to_ppm(back) == render.image_to_ppm(img)

    def test_bad_header_rejected(self):
        with pytest.raises(ParseError):
            render.ppm_decode(b"P5\n2 2\n255\n" + b"\x00" * 12)


class TestRenderBev:
    def _spec(self):
        return BevGridSpec(x_min=0.0, x_max=16.0, y_min=-8.0, y_max=8.0,
                           resolution=1.0, channels=2)

    def test_empty_grid_is_black_with_grid_dims(self):
        spec = self._spec()
        grid = BevFeatureMap(spec=spec, data=Tensor(np.zeros((2, 16, 16))))
        img = render.ppm_decode(render.render_bev_features(grid))
        assert img.shape == (16, 16, 3)
        assert np.all(img == 0)

    def test_feature_peak_appears_white(self):
        spec = self._spec()
        data = np.zeros((2, 16, 16))
        data[0, 3, 4] = 7.5
        grid = BevFeatureMap(spec=spec, data=Tensor(data))
        img = render.ppm_decode(render.render_bev_features(grid))
        assert img[16 - 1 - 3, 4].tolist() == [255, 255, 255]

    def test_tp_legend(self):
        spec = self._spec()
        gt = Box3D(cx=8.0, cy=0.0, cz=0.5, length=4.0, width=2.0, height=1.0, yaw=0.3)
        near = Box3D(cx=8.5, cy=0.3, cz=0.5, length=4.0, width=2.0, height=1.0, yaw=0.3)
        det = Detection(box=near, class_name="Car", score=0.9)
        img = render.ppm_decode(render.render_bev_boxes(spec, [gt], [det], iou_thr=0.3))
        colors = {tuple(c) for c in img.reshape(-1, 3)}
        assert render.GT_COLOR in colors
        assert render.TP_COLOR in colors
        assert render.FP_COLOR not in colors

    def test_fp_legend(self):
        spec = self._spec()
        gt = Box3D(cx=4.0, cy=-4.0, cz=0.5, length=2.0, width=1.0, height=1.0, yaw=0.0)
        det = Detection(box=Box3D(cx=12.0, cy=4.0, cz=0.5, length=2.0, width=1.0,
                                  height=1.0, yaw=0.0), class_name="Car", score=0.9)
        img = render.ppm_decode(render.render_bev_boxes(spec, [gt], [det], iou_thr=0.3))
        colors = {tuple(c) for c in img.reshape(-1, 3)}
        assert render.FP_COLOR in colors and render.GT_COLOR in colors
