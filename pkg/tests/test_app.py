import pytest
import yaml

from app import PipelineController, main
from railfuse.tools.config import SCENARIO_DIR


@pytest.fixture
def controller():
    return PipelineController()


@pytest.fixture
def noise_free_config(tmp_path):
    data = yaml.safe_load((SCENARIO_DIR / "short.yaml").read_text())
    data["sensors"]["noise_free"] = True
    path = tmp_path / "noise_free.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


class TestRunArguments:
    def test_ablation_flags(self, controller):
        args = controller.parser.parse_args(["run", "--config", str(SCENARIO_DIR / "short.yaml"), "--no-gnss",
                                             "--seed", "5", "--output-dir", "elsewhere"])
        sc = controller.scenario(args)
        assert sc.backend.use_gnss is False
        assert sc.backend.use_odometer is True
        assert sc.run.seed == 5
        assert sc.run.output_dir == "elsewhere"
        assert sc.run.export_map == "map.ply"

    def test_lidar_inertial_only(self, controller):
        args = controller.parser.parse_args(["run", "--config", str(SCENARIO_DIR / "short.yaml"),
                                             "--lidar-inertial-only", "--align-yaw"])
        sc = controller.scenario(args)
        assert not sc.backend.use_gnss and not sc.backend.use_odometer
        assert sc.run.align_yaw is True

    def test_defaults_come_from_file(self, controller):
        args = controller.parser.parse_args(["run", "--config", str(SCENARIO_DIR / "short.yaml")])
        sc = controller.scenario(args)
        assert sc.backend.use_gnss and sc.backend.use_odometer
        assert sc.run.output_dir == "out/short"
        assert sc.run.align_yaw is False

    def test_command_is_required(self, controller):
        with pytest.raises(SystemExit):
            controller.parser.parse_args([])


class TestExitCodes:
    def test_missing_config(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "absent.yaml")]) == 2

    def test_invalid_config(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("backend:\n  window_size: 1\n")
        assert main(["align-check", "--config", str(path)]) == 2

    def test_no_scenes(self, tmp_path):
        assert main(["calibrate-lambda", "--scenes", str(tmp_path)]) == 2

    def test_align_check(self, noise_free_config):
        assert main(["--log-level", "WARNING", "align-check", "--config", str(noise_free_config),
                     "--seeds", "2"]) == 0

    def test_align_check_failure(self, tmp_path):
        data = yaml.safe_load((SCENARIO_DIR / "short.yaml").read_text())
        data["backend"]["align_min_pairs"] = 100
        path = tmp_path / "few_pairs.yaml"
        path.write_text(yaml.safe_dump(data))
        assert main(["align-check", "--config", str(path)]) == 1

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["--version"])
        assert info.value.code == 0
        assert "railfuse" in capsys.readouterr().out
