import argparse
import logging
from pathlib import Path
import sys

import structlog

from railfuse import __version__
from railfuse.services.pipeline import align_check, calibrate_lambda, run_pipeline
from railfuse.tools.config import ScenarioConfig
from railfuse.tools.exceptions import ConfigError, ExportError


def configure_logging(level="INFO"):
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(message)s",
        stream=sys.stdout,
        force=True,
    )
    structlog.configure(
        processors=[
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.dev.ConsoleRenderer(),
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=True,
    )


log = structlog.get_logger()


class PipelineController:
    """Command surface: run a scenario, calibrate e_lambda, check the GNSS alignment."""

    def __init__(self):
        self.parser = argparse.ArgumentParser(prog="railfuse", description="Rail LiDAR/IMU/odometer/GNSS fusion")
        self.parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
        self.parser.add_argument("--log-level", default="INFO",
                                 choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        sub = self.parser.add_subparsers(dest="command", required=True)

        run = sub.add_parser("run", help="run the full pipeline on a scenario")
        run.add_argument("--config", required=True, type=Path)
        run.add_argument("--no-gnss", action="store_true")
        run.add_argument("--no-odometer", action="store_true")
        run.add_argument("--lidar-inertial-only", action="store_true")
        run.add_argument("--export-map", type=str)
        run.add_argument("--metrics", type=str)
        run.add_argument("--output-dir", type=str)
        run.add_argument("--seed", type=int)
        run.add_argument("--align-yaw", action="store_true", default=None)
        run.set_defaults(handler=self.run)

        calibrate = sub.add_parser("calibrate-lambda", help="calibrate the degeneracy threshold e_lambda")
        calibrate.add_argument("--scenes", required=True, type=Path)
        calibrate.set_defaults(handler=self.calibrate_lambda)

        align = sub.add_parser("align-check", help="recover the W -> W0 extrinsic from simulated fixes")
        align.add_argument("--config", required=True, type=Path)
        align.add_argument("--seeds", type=int, default=1)
        align.set_defaults(handler=self.align_check)

    def scenario(self, args):
        scenario = ScenarioConfig.from_yaml(args.config)
        gnss = not (args.no_gnss or args.lidar_inertial_only)
        odometer = not (args.no_odometer or args.lidar_inertial_only)
        scenario = scenario.override("backend", use_gnss=None if gnss else False,
                                     use_odometer=None if odometer else False)
        return scenario.override("run", seed=args.seed, export_map=args.export_map, metrics=args.metrics,
                                 output_dir=args.output_dir, align_yaw=args.align_yaw)

    def run(self, args):
        scenario = self.scenario(args)
        log.info("Starting run", config=str(args.config), seed=scenario.run.seed,
                 gnss=scenario.backend.use_gnss, odometer=scenario.backend.use_odometer)
        result = run_pipeline(scenario)
        log.info("Run complete", **{k: v for k, v in result.metrics.items() if not isinstance(v, dict)},
                 outputs={k: str(v) for k, v in result.outputs.items()})
        return 0 if "error" not in result.metrics else 1

    def calibrate_lambda(self, args):
        scenes = sorted(args.scenes.glob("*.yaml")) if args.scenes.is_dir() else [args.scenes]
        if not scenes:
            raise ConfigError(f"no scenario files in {args.scenes}")
        report = calibrate_lambda(scenes)
        log.info("Calibration complete", scenes=len(scenes), **report)
        return 0

    def align_check(self, args):
        scenario = ScenarioConfig.from_yaml(args.config)
        seeds = [scenario.run.seed + k for k in range(args.seeds)]
        reports = align_check(scenario, seeds)
        failed = [r for r in reports if "error" in r]
        if failed:
            log.warning("Alignment failed for some seeds", failed=len(failed), total=len(reports))
        return 1 if failed else 0

    def dispatch(self, argv=None):
        args = self.parser.parse_args(argv)
        configure_logging(args.log_level)
        try:
            return args.handler(args)
        except ConfigError as e:
            log.error("Invalid configuration", error=str(e))
            return 2
        except ExportError as e:
            log.error("Export failed", path=e.path, error=str(e))
            return 3


def main(argv=None):
    controller = PipelineController()
    return controller.dispatch(argv)


if __name__ == '__main__':
    sys.exit(main())
