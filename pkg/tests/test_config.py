import pytest

from railfuse.tools.config import (BackendConfig, RunConfig, ScenarioConfig, SensorConfig, WorldConfig)
from railfuse.tools.exceptions import ConfigError


class TestSections:
    def test_defaults_are_valid(self):
        sc = ScenarioConfig()
        assert sc.backend.gnss_residual_mode == "verbatim"
        assert sc.sensors.frame_period == pytest.approx(0.1)

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            ScenarioConfig.from_dict({"lidar": {}})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            ScenarioConfig.from_dict({"sensors": {"lidar_rpm": 600}})

    def test_section_must_be_mapping(self):
        with pytest.raises(ConfigError):
            ScenarioConfig.from_dict({"run": [1, 2]})

    @pytest.mark.parametrize("segment", [
        {"length": 0.0},
        {"length": 100.0, "radius": 50.0},
        {"length": 100.0, "tag": "tunnel"},
        {"length": 100.0, "grade": 0.01},
    ])
    def test_bad_segments(self, segment):
        with pytest.raises(ConfigError):
            WorldConfig(segments=(segment,))

    def test_bad_sensor_values(self):
        with pytest.raises(ConfigError):
            SensorConfig(sigma_a=0.0)
        with pytest.raises(ConfigError):
            SensorConfig(imu_dropouts=((5.0, 4.0),))
        with pytest.raises(ConfigError):
            SensorConfig(lidar_lever=(1.0, 0.0, 0.5))

    def test_bad_run_values(self):
        with pytest.raises(ConfigError):
            RunConfig(speed_profile=((0.0, 1.0), (0.0, 2.0)))
        with pytest.raises(ConfigError):
            RunConfig(duration=0.0)

    def test_bad_residual_mode(self):
        with pytest.raises(ConfigError):
            BackendConfig(gnss_residual_mode="robust")

    def test_config_error_is_value_error(self):
        with pytest.raises(ValueError):
            BackendConfig(window_size=1)


class TestScenarioFiles:
    def test_all_bundled_scenarios_load(self, scenario_dir):
        files = sorted(scenario_dir.rglob("*.yaml"))
        assert len(files) >= 8
        for path in files:
            sc = ScenarioConfig.from_yaml(path)
            assert sc.run.duration > 0

    def test_lists_become_tuples(self, scenario_dir):
        sc = ScenarioConfig.from_yaml(scenario_dir / "short.yaml")
        assert isinstance(sc.run.speed_profile, tuple)
        assert sc.run.speed_profile[-1] == (2.0, 4.0)

    def test_dict_round_trip(self, scenario_dir):
        sc = ScenarioConfig.from_yaml(scenario_dir / "winter_slip.yaml")
        assert ScenarioConfig.from_dict(sc.to_dict()) == sc

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            ScenarioConfig.from_yaml(tmp_path / "absent.yaml")

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("run: [unclosed\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="invalid YAML"):
            ScenarioConfig.from_yaml(path)

    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("", encoding="utf-8")
        assert ScenarioConfig.from_yaml(path) == ScenarioConfig()


class TestOverride:
    def test_replaces_values(self):
        sc = ScenarioConfig().override("backend", use_gnss=False, window_size=5)
        assert sc.backend.use_gnss is False
        assert sc.backend.window_size == 5
        assert sc.sensors == ScenarioConfig().sensors

    def test_none_values_are_ignored(self):
        sc = ScenarioConfig()
        assert sc.override("run", seed=None) is sc
        assert sc.override("run", seed=7, output_dir=None).run.output_dir == sc.run.output_dir

    def test_override_is_validated(self):
        with pytest.raises(ConfigError):
            ScenarioConfig().override("run", duration=-1.0)
