"""Layered key=value run configuration."""

import math

import pytest

from rfshape.augment import NORM_BBOX
from rfshape.config import (
    ConfigError,
    RunConfig,
    build_run_config,
    load_config_file,
    parse_config_text,
    run_config_text,
)


class TestParse:
    def test_basic_lines(self):
        text = "seed=3\ncfar.p_fa = 1e-4\n\n# comment\nmodel.mlp1=8,16\n"
        assert parse_config_text(text) == {
            "seed": "3", "cfar.p_fa": "1e-4", "model.mlp1": "8,16"}

    def test_last_duplicate_wins(self):
        assert parse_config_text("a=1\na=2\n") == {"a": "2"}

    def test_missing_equals_names_line(self):
        with pytest.raises(ConfigError, match="cfg.txt:2"):
            parse_config_text("a=1\nbogus\n", source="cfg.txt")

    def test_empty_key(self):
        with pytest.raises(ConfigError, match="empty key"):
            parse_config_text("=5\n")

    def test_file_round_trip(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("seed=9\ntrain.steps=12\n")
        assert load_config_file(p) == {"seed": "9", "train.steps": "12"}

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config_file(tmp_path / "nope.cfg")


class TestBuild:
    def test_defaults(self):
        cfg = build_run_config()
        assert cfg.seed == 0
        assert cfg.rig.horizontal.n_elements == 86
        assert cfg.cfar.variant == "ca"
        assert cfg.train.seed == 0

    def test_sections_route_to_modules(self):
        cfg = build_run_config({
            "seed": "7",
            "norm_mode": NORM_BBOX,
            "radar.n_elements": "16",
            "radar.noise_sigma": "0.02",
            "cfar.variant": "os",
            "cfar.p_fa": "1e-4",
            "fusion.power_match_db": "6.0",
            "fusion.nms_radius": "2",
            "temporal.max_frames": "12",
            "model.n_coarse": "256",
            "model.mlp1": "32,64",
            "train.steps": "25",
            "dataset.per_object": "2",
            "dataset.recipes": "depth",
        })
        assert cfg.seed == 7
        assert cfg.rig.horizontal.n_elements == 16
        assert cfg.rig.vertical.n_elements == 16
        assert cfg.rig.noise_sigma == pytest.approx(0.02)
        assert cfg.cfar.variant == "os"
        assert cfg.cfar.p_fa == pytest.approx(1e-4)
        assert cfg.fusion.power_match_db == pytest.approx(6.0)
        assert cfg.nms_radius == 2
        assert cfg.max_frames == 12
        assert cfg.model.n_coarse == 256
        assert cfg.model.mlp1 == (32, 64)
        assert cfg.train.steps == 25
        assert cfg.per_object == 2
        assert cfg.recipes == ("depth",)

    def test_later_mapping_wins(self):
        cfg = build_run_config({"train.steps": "10", "seed": "1"},
                               {"train.steps": "99"})
        assert cfg.train.steps == 99
        assert cfg.seed == 1

    def test_root_seed_flows_into_train(self):
        cfg = build_run_config({"seed": "42"})
        assert cfg.train.seed == 42
        pinned = build_run_config({"seed": "42", "train.seed": "5"})
        assert pinned.train.seed == 5

    def test_norm_mode_flows_into_train(self):
        cfg = build_run_config({"norm_mode": NORM_BBOX})
        assert cfg.train.norm_mode == NORM_BBOX

    def test_bare_mount_height_sets_both(self):
        cfg = build_run_config({"mount_height": "1.5"})
        assert cfg.rig.mount_height == pytest.approx(1.5)
        assert cfg.fusion.mount_height == pytest.approx(1.5)

    def test_max_frames_none(self):
        cfg = build_run_config({"temporal.max_frames": "none"})
        assert cfg.max_frames is None

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="cfar.window"):
            build_run_config({"cfar.window": "3"})
        with pytest.raises(ConfigError, match="unknown section"):
            build_run_config({"sonar.gain": "3"})
        with pytest.raises(ConfigError, match="unknown key frobnicate"):
            build_run_config({"frobnicate": "1"})

    def test_bad_value_names_key(self):
        with pytest.raises(ConfigError, match="train.steps"):
            build_run_config({"train.steps": "many"})
        with pytest.raises(ConfigError, match="model.mlp1"):
            build_run_config({"model.mlp1": "a,b"})

    def test_invalid_norm_mode(self):
        with pytest.raises(ConfigError, match="norm_mode"):
            build_run_config({"norm_mode": "whitened"})

    def test_paths_must_exist(self, tmp_path):
        good = tmp_path / "scene.txt"
        good.write_text("")
        cfg = build_run_config({"paths.scene": str(good)})
        assert cfg.paths["scene"] == str(good)
        with pytest.raises(ConfigError, match="paths.scene"):
            build_run_config({"paths.scene": str(tmp_path / "gone.txt")})


class TestRoundTrip:
    def test_text_reparses_to_same_config(self):
        cfg = build_run_config({
            "seed": "3",
            "radar.n_elements": "32",
            "radar.fov_limit": str(math.radians(30.0)),
            "cfar.variant": "os",
            "fusion.nms_radius": "2",
            "temporal.max_frames": "8",
            "model.upsample": "2",
            "train.learning_rate": "0.005",
            "dataset.recipes": "radar",
        })
        text = run_config_text(cfg)
        again = build_run_config(parse_config_text(text))
        assert run_config_text(again) == text
        assert again.rig.horizontal.n_elements == 32
        assert again.max_frames == 8
        assert again.train.learning_rate == pytest.approx(0.005)

    def test_default_round_trip(self):
        cfg = RunConfig()
        text = run_config_text(cfg)
        again = build_run_config(parse_config_text(text))
        assert run_config_text(again) == text
