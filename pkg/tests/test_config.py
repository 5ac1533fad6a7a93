import numpy as np
import pytest

from config import (
    CONFIG_ENV_VAR,
    DetectorParams,
    PipelineConfig,
    TrackingParams,
    build_dataclass,
    calibration_from_dict,
    calibration_to_dict,
    load_calibration,
    load_config,
    read_yaml,
    save_calibration,
    save_config,
)
from core_types import Calibration, PinholeCamera
from errors import ConfigError
from sim_harness import default_calibration


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class Test_defaults:
    def test_documented_values(self):
        cfg = PipelineConfig()
        assert cfg.detector.harris_lambda == 1e-4
        assert cfg.detector.gamma == 0.5
        assert cfg.detector.s_sat == 0.9
        assert cfg.detector.n_target == 25
        assert (cfg.detector.r_min, cfg.detector.r_max) == (8.0, 32.0)
        assert cfg.descriptor.patch_size == 48
        assert cfg.descriptor.distance_threshold == 0.05
        assert cfg.tracking.window_sigma == 3.0
        assert (cfg.tracking.w_min, cfg.tracking.w_max) == (8.0, 64.0)
        assert cfg.tracking.miss_max == 3
        assert cfg.filter.dt_max == 0.02

    def test_no_file_no_env(self, monkeypatch):
        monkeypatch.delenv(CONFIG_ENV_VAR, raising=False)
        assert load_config() == PipelineConfig()


class Test_load_config:
    def test_partial_file(self, tmp_path):
        path = _write(tmp_path / "c.yaml", "detector:\n  gamma: 0.3\n  n_target: 10\ntracking:\n  j_max: 12\nseed: 4\n")
        cfg = load_config(path)
        assert cfg.detector.gamma == 0.3
        assert cfg.detector.n_target == 10
        assert cfg.detector.s_sat == 0.9
        assert cfg.tracking.j_max == 12
        assert cfg.seed == 4

    def test_env_fallback(self, tmp_path, monkeypatch):
        path = _write(tmp_path / "c.yaml", "filter:\n  depth_update: true\n")
        monkeypatch.setenv(CONFIG_ENV_VAR, str(path))
        assert load_config().filter.depth_update is True

    def test_empty_file(self, tmp_path):
        assert load_config(_write(tmp_path / "c.yaml", "")) == PipelineConfig()

    def test_int_promoted_to_float(self, tmp_path):
        cfg = load_config(_write(tmp_path / "c.yaml", "tracking:\n  w_min: 4\n"))
        assert cfg.tracking.w_min == 4.0
        assert isinstance(cfg.tracking.w_min, float)

    def test_tuple_field(self, tmp_path):
        cfg = load_config(_write(tmp_path / "c.yaml", "detector:\n  depth_error_coeffs: [0.001, 0, 0.002]\n"))
        assert cfg.detector.depth_error_coeffs == (0.001, 0.0, 0.002)

    @pytest.mark.parametrize(
        "text, key",
        [
            ("detector:\n  gama: 0.3\n", "detector.gama"),
            ("bogus: 1\n", "bogus"),
            ("detector:\n  n_target: 2.5\n", "detector.n_target"),
            ("detector:\n  n_target: true\n", "detector.n_target"),
            ("filter:\n  depth_update: 1\n", "filter.depth_update"),
            ("detector: 3\n", "detector"),
            ("detector:\n  depth_error_coeffs: [1, 2]\n", "detector.depth_error_coeffs"),
            ("detector:\n  gamma: 1.5\n", "detector.gamma"),
            ("tracking:\n  w_min: 70\n", "tracking.w_min"),
            ("tracking:\n  duplicate_radius: -1\n", "tracking.duplicate_radius"),
            ("descriptor:\n  use_visual_bits: false\n  use_depth_bits: false\n", "descriptor.use_visual_bits"),
        ],
    )
    def test_rejects(self, tmp_path, text, key):
        with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
            load_config(_write(tmp_path / "c.yaml", text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.yaml")

    def test_invalid_yaml(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(_write(tmp_path / "c.yaml", "detector: [unclosed\n"))

    def test_not_a_mapping(self, tmp_path):
        with pytest.raises(ConfigError, match="mapping"):
            load_config(_write(tmp_path / "c.yaml", "- 1\n- 2\n"))

    def test_save_and_reload(self, tmp_path):
        cfg = PipelineConfig(detector=DetectorParams(gamma=0.2), tracking=TrackingParams(j_max=7), seed=9)
        save_config(cfg, tmp_path / "c.yaml")
        assert load_config(tmp_path / "c.yaml") == cfg


class Test_read_yaml:
    def test_mapping_and_empty(self, tmp_path):
        assert read_yaml(_write(tmp_path / "s.yaml", "trajectory:\n  kind: circle\n")) == {"trajectory": {"kind": "circle"}}
        assert read_yaml(_write(tmp_path / "e.yaml", "")) == {}

    def test_rejects_list(self, tmp_path):
        with pytest.raises(ConfigError, match="mapping"):
            read_yaml(_write(tmp_path / "l.yaml", "- 1\n"))


class Test_build_dataclass:
    def test_prefix_in_message(self):
        with pytest.raises(ConfigError, match=r"outer\.miss_max"):
            build_dataclass(TrackingParams, {"miss_max": "3"}, "outer")


class Test_calibration:
    def test_round_trip(self, tmp_path):
        calib = default_calibration(160, 120, fx=110.0)
        save_calibration(calib, tmp_path / "calib.cfg")
        back = load_calibration(tmp_path / "calib.cfg")
        assert back.camera == calib.camera
        assert back.d_min == 0.75 and back.d_max == 6.0
        np.testing.assert_allclose(back.extrinsics.T_cam_imu.R, calib.extrinsics.T_cam_imu.R, atol=1e-12)
        np.testing.assert_allclose(back.extrinsics.T_cam_imu.t, calib.extrinsics.T_cam_imu.t, atol=1e-12)

    def test_depth_camera_kept(self):
        cam = PinholeCamera(100, 100, 50, 40, 100, 80)
        calib = Calibration(cam, depth_camera=PinholeCamera(90, 90, 40, 30, 80, 60), dark_noise=2.0)
        back = calibration_from_dict(calibration_to_dict(calib))
        assert back.depth_camera == calib.depth_camera
        assert back.dark_noise == 2.0

    def test_minimal(self):
        calib = calibration_from_dict({"camera": {"fx": 100, "fy": 100, "cx": 50, "cy": 40, "width": 100, "height": 80}})
        assert calib.extrinsics.T_cam_imu.translation == (0.0, 0.0, 0.0)
        assert calib.camera.distortion == (0.0, 0.0, 0.0, 0.0)

    @pytest.mark.parametrize(
        "data, key",
        [
            ({}, "camera"),
            ({"camera": {"fx": 1}}, "camera.fy"),
            ({"camera": {"fx": 1, "fy": 1, "cx": 1, "cy": 1, "width": 4, "height": 4, "k9": 0}}, "camera.k9"),
            ({"cam": {}}, "cam"),
            ({"camera": {"fx": 100, "fy": 100, "cx": 50, "cy": 40, "width": 100, "height": 80},
              "T_cam_imu": {"rotation": [0, 0, 0, 1]}}, "T_cam_imu.rotation"),
            ({"camera": {"fx": 100, "fy": 100, "cx": 50, "cy": 40, "width": 100, "height": 80},
              "d_min": 7.0}, "d_min"),
        ],
    )
    def test_rejects(self, data, key):
        with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
            calibration_from_dict(data)
