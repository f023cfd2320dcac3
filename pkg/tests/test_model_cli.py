"""Model assembly, weight persistence, the training smoke loop, and the
command-line surface."""

import numpy as np
import pytest
from dataclasses import replace

from tridet import cli
from tridet.config import ModelConfig, serialize_config
from tridet.model import (WeightFileError, build_model, load_weights,
                          save_weights)
from tridet.ppm import write_ppm
from tridet.train import run_inference, synthetic_scene, train_toy


def toy_cfg(variant="full", **kw):
    cfg = ModelConfig.default(variant)
    return replace(cfg, **kw) if kw else cfg


class TestBuildModel:
    def test_tiny_one_block_per_head(self):
        model = build_model(toy_cfg("tiny"))
        assert all(len(h.blocks) == 1 for h in model.heads)
        assert len(model.neck.ca_taps()) == 3

    def test_full_two_blocks_per_head(self):
        model = build_model(toy_cfg("full"))
        assert all(len(h.blocks) == 2 for h in model.heads)

    def test_nano_depthwise_everywhere(self):
        model = build_model(toy_cfg("nano"))
        convs = model.spatial_convs()
        assert convs
        for name, conv in convs:
            assert conv.groups == conv.in_c, name

    def test_same_seed_same_checksum(self):
        a = build_model(toy_cfg())
        b = build_model(toy_cfg())
        assert a.checksum() == b.checksum()
        c = build_model(toy_cfg(seed=1))
        assert c.checksum() != a.checksum()

    def test_forward_shapes(self):
        model = build_model(toy_cfg())
        raws = model.forward(np.random.default_rng(0).random((3, 64, 64)))
        assert [r.shape for r in raws] == [(21, 8, 8), (21, 4, 4), (21, 2, 2)]


class TestWeights:
    def test_round_trip_checksum(self, tmp_path):
        model = build_model(toy_cfg())
        before = model.checksum()
        path = tmp_path / "w.bin"
        save_weights(model, path)
        # perturb, then reload
        next(iter(model.params())).value[:] += 1.0
        load_weights(model, path)
        assert model.checksum() == before

    def test_foreign_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"XXXX" + bytes(64))
        with pytest.raises(WeightFileError, match="magic"):
            load_weights(build_model(toy_cfg()), path)

    def test_truncated_file_names_tensor(self, tmp_path):
        model = build_model(toy_cfg())
        path = tmp_path / "w.bin"
        save_weights(model, path)
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(WeightFileError, match="truncated payload for"):
            load_weights(model, path)

    def test_unknown_tensor_rejected(self, tmp_path):
        small = build_model(toy_cfg("tiny"))
        big = build_model(toy_cfg("full"))
        path = tmp_path / "w.bin"
        save_weights(big, path)
        with pytest.raises(WeightFileError):
            load_weights(small, path)


class TestTrainToy:
    def test_loss_decreases_and_is_deterministic(self):
        cfg = toy_cfg()
        curve_a = train_toy(build_model(cfg), cfg, 20, 7)
        curve_b = train_toy(build_model(cfg), cfg, 20, 7)
        assert curve_a == curve_b
        assert curve_a[-1] < curve_a[0]

    def test_zero_learning_rate_constant_loss(self):
        cfg = toy_cfg()
        curve = train_toy(build_model(cfg), cfg, 5, 7, lr=0.0)
        assert all(v == curve[0] for v in curve)

    def test_scene_has_labeled_boxes(self):
        scene = synthetic_scene()
        assert len(scene.boxes) == 3
        assert scene.pixels.shape == (3, 64, 64)
        assert {b.class_id for b in scene.boxes} == {0, 1}


class TestCli:
    def _write_cfg(self, tmp_path, cfg):
        path = tmp_path / "m.cfg"
        path.write_text(serialize_config(cfg))
        return str(path)

    def _zero_weights(self, tmp_path, cfg, edit=None):
        model = build_model(cfg)
        for p in model.params():
            p.value[:] = 0.0
        if edit is not None:
            edit(model)
        path = tmp_path / "w.bin"
        save_weights(model, path)
        return str(path)

    def test_run_zero_weights_no_detections(self, tmp_path, capsys):
        cfg = toy_cfg()
        cfg_path = self._write_cfg(tmp_path, cfg)
        w_path = self._zero_weights(tmp_path, cfg)
        img_path = str(tmp_path / "img.ppm")
        write_ppm(img_path, np.random.default_rng(0).random((3, 64, 64)))
        assert cli.main(["run", cfg_path, w_path, img_path]) == 0
        assert capsys.readouterr().out == ""

    def test_run_planted_detection(self, tmp_path, capsys):
        cfg = toy_cfg(conf_threshold=0.3)
        cfg_path = self._write_cfg(tmp_path, cfg)

        def plant(model):
            bias = model.heads[2].conv1.bias.value
            nc = cfg.num_classes
            for a in range(3):
                bias[a * (5 + nc) + 4] = 6.0 if a == 0 else -10.0
                bias[a * (5 + nc) + 5] = 6.0

        w_path = self._zero_weights(tmp_path, cfg, plant)
        img_path = str(tmp_path / "img32.ppm")
        write_ppm(img_path, np.random.default_rng(1).random((3, 32, 32)))
        assert cli.main(["run", cfg_path, w_path, img_path]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 1
        fields = lines[0].split()
        assert fields[1] == "0"
        assert float(fields[3]) == 16.0 and float(fields[4]) == 16.0
        assert float(fields[5]) == 40.0 and float(fields[6]) == 40.0

    def test_run_byte_identical_across_invocations(self, tmp_path, capsys):
        cfg = toy_cfg(conf_threshold=0.2)
        cfg_path = self._write_cfg(tmp_path, cfg)
        model = build_model(cfg)
        w_path = str(tmp_path / "w.bin")
        save_weights(model, w_path)
        img_path = str(tmp_path / "img.ppm")
        write_ppm(img_path, np.random.default_rng(2).random((3, 64, 64)))
        cli.main(["run", cfg_path, w_path, img_path])
        first = capsys.readouterr().out
        cli.main(["run", cfg_path, w_path, img_path])
        assert capsys.readouterr().out == first

    def test_run_dump_features(self, tmp_path, capsys):
        cfg = toy_cfg()
        cfg_path = self._write_cfg(tmp_path, cfg)
        w_path = self._zero_weights(tmp_path, cfg)
        img_path = str(tmp_path / "img.ppm")
        write_ppm(img_path, np.random.default_rng(3).random((3, 64, 64)))
        feat_dir = tmp_path / "feats"
        assert cli.main(["run", cfg_path, w_path, img_path,
                         "--dump-features", str(feat_dir)]) == 0
        names = sorted(p.name for p in feat_dir.iterdir())
        assert names == ["ca3.pgm", "ca4.pgm", "ca5.pgm",
                         "p3.pgm", "p4.pgm", "p5.pgm"]
        capsys.readouterr()

    def test_run_missing_file_one_line_error(self, tmp_path, capsys):
        cfg_path = self._write_cfg(tmp_path, toy_cfg())
        rc = cli.main(["run", cfg_path, str(tmp_path / "nope.bin"),
                       str(tmp_path / "nope.ppm")])
        assert rc != 0
        err = capsys.readouterr().err
        assert err.startswith("error: ")
        assert err.count("\n") == 1

    def test_gradcheck_command(self, capsys):
        assert cli.main(["gradcheck", "--module", "tensor-core",
                         "--seeds", "2"]) == 0
        out = capsys.readouterr().out
        assert "all checks passed" in out

    def test_gradcheck_corrupt_fixture_fails(self, capsys):
        assert cli.main(["gradcheck", "--module", "_corrupt",
                         "--seeds", "1"]) == 1
        capsys.readouterr()

    def test_params_compare_csp(self, tmp_path, capsys):
        cfg_path = self._write_cfg(tmp_path, toy_cfg())
        assert cli.main(["params", cfg_path, "--compare-csp"]) == 0
        out = capsys.readouterr().out
        reduction = int([ln for ln in out.splitlines()
                         if ln.startswith("csp-reduction")][0].split()[1])
        assert reduction > 0

    def test_params_tiny_below_full(self, tmp_path, capsys):
        totals = []
        for variant in ("tiny", "full"):
            cfg_path = self._write_cfg(tmp_path, toy_cfg(variant))
            assert cli.main(["params", cfg_path]) == 0
            out = capsys.readouterr().out
            totals.append(int([ln for ln in out.splitlines()
                               if ln.startswith("total")][0].split()[1]))
        assert totals[0] < totals[1]

    def test_train_toy_command(self, tmp_path, capsys):
        cfg_path = self._write_cfg(tmp_path, toy_cfg())
        assert cli.main(["train-toy", cfg_path, "--steps", "3",
                         "--seed", "7"]) == 0
        out = capsys.readouterr().out
        assert out.startswith("step 0 loss ")
        assert "final loss" in out

    def test_weights_io_selftest(self, capsys):
        assert cli.main(["weights-io-selftest"]) == 0
        assert "round-trip ok" in capsys.readouterr().out


class TestInference:
    def test_pure_function_of_inputs(self):
        cfg = toy_cfg(conf_threshold=0.2)
        model = build_model(cfg)
        img = np.random.default_rng(4).random((3, 64, 64))
        a = run_inference(model, cfg, img)
        b = run_inference(model, cfg, img)
        assert a == b
