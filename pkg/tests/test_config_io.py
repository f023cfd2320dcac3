"""Configuration text format and portable pixmap I/O."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from tridet.config import (ConfigError, ModelConfig, load_config,
                           parse_config, serialize_config)
from tridet.ppm import ImageFormatError, read_ppm, write_pgm, write_ppm


class TestConfig:
    def test_round_trip_fixed_point(self):
        cfg = ModelConfig.default("tiny")
        text = serialize_config(cfg)
        again = serialize_config(parse_config(text))
        assert text == again
        assert parse_config(text) == cfg

    def test_comments_and_blank_lines_ignored(self):
        text = serialize_config(ModelConfig.default())
        noisy = "# header\n\n" + text.replace(
            "model.seed = 0", "model.seed = 3   # inline note")
        cfg = parse_config(noisy)
        assert cfg.seed == 3

    def test_unknown_key_rejected_with_line_number(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config("model.bogus = 1\n")

    def test_malformed_line_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("model.variant full\n")

    def test_variant_contracts(self):
        assert ModelConfig.default("tiny").n_blocks == 1
        assert ModelConfig.default("full").n_blocks == 2
        assert ModelConfig.default("nano").depthwise
        assert not ModelConfig.default("full").depthwise
        x = ModelConfig.default("x-toy")
        assert x.widths == (32, 64, 128)
        assert x.mosaic_scale_range == (0.25, 1.75)
        assert x.mosaic_shift_limit == 0.1

    def test_validation_errors(self):
        with pytest.raises(ConfigError):
            ModelConfig(variant="huge").validate()
        with pytest.raises(ConfigError):
            ModelConfig(widths=(10, 32, 64)).validate()
        with pytest.raises(ConfigError):
            ModelConfig(conf_threshold=1.5).validate()
        with pytest.raises(ConfigError):
            ModelConfig(smooth_eps=1.0).validate()

    def test_anchor_parsing(self):
        text = serialize_config(ModelConfig.default()).replace(
            "anchors.p3 = 8x8,16x12,12x16", "anchors.p3 = 4x6,8x6,6x9")
        cfg = parse_config(text)
        assert cfg.anchors[0] == ((4.0, 6.0), (8.0, 6.0), (6.0, 9.0))

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "m.cfg"
        path.write_text(serialize_config(ModelConfig.default("nano")))
        assert load_config(path).variant == "nano"


class TestPpm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = np.round(rng.random((3, 6, 8)) * 255) / 255
        path = tmp_path / "img.ppm"
        write_ppm(path, img)
        back = read_ppm(path)
        assert_allclose(back, img, atol=1e-9)

    def test_comment_in_header(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# a comment\n2 1\n255\n" + bytes(6))
        img = read_ppm(path)
        assert img.shape == (3, 1, 2)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(ImageFormatError, match="magic"):
            read_ppm(path)

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = tmp_path / "t.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(ImageFormatError, match="byte"):
            read_ppm(path)

    def test_unsupported_maxval(self, tmp_path):
        path = tmp_path / "m.ppm"
        path.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(ImageFormatError, match="maxval"):
            read_ppm(path)

    def test_pgm_normalizes(self, tmp_path):
        path = tmp_path / "g.pgm"
        write_pgm(path, np.array([[0.0, 10.0], [5.0, 10.0]]))
        data = path.read_bytes()
        assert data.startswith(b"P5\n2 2\n255\n")
        assert list(data[-4:]) == [0, 255, 128, 255]
