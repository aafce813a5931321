"""CLI utility to calibrate one dataset end to end."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from licalib.commands import EXIT_CHECK, EXIT_OK, RESULT_FILE, cmd_calibrate, configure_logging, exit_code_for
from licalib.config import load_config, parse_cli_overrides
from licalib.errors import CalibrationError

logger = logging.getLogger("licalib.scripts.calibrate")


def main() -> None:
    """CLI entrypoint."""

    parser = argparse.ArgumentParser(
        description="Run LiDAR-IMU calibration. Extra --section.key value pairs override config.yml."
    )
    parser.add_argument("--config", default=None, help="YAML config (default: repository config.yml)")
    parser.add_argument("--dataset-dir", default=None, help="Dataset directory (default: dataset.root)")
    parser.add_argument("--output-dir", default=None, help="Run directory (default: dataset.output_dir)")
    parser.add_argument("--check", action="store_true", help="Exit 4 on ground-truth threshold failures")
    parser.add_argument("--log-level", default="INFO", help="Logging level")
    args, extra = parser.parse_known_args()
    configure_logging(args.log_level)

    try:
        config = load_config(Path(args.config) if args.config else None, parse_cli_overrides(extra))
        output_dir = Path(args.output_dir or config.dataset.output_dir)
        result = cmd_calibrate(config, Path(args.dataset_dir) if args.dataset_dir else None, output_dir)
    except CalibrationError as exc:
        logger.error("%s", exc)
        raise SystemExit(exit_code_for(exc)) from exc
    print(f"Calibration written: {(output_dir / RESULT_FILE).as_posix()}")
    verdict = result.evaluation.verdict if result.evaluation is not None else None
    if args.check and verdict is not None and not verdict.passed:
        for failure in verdict.failures:
            logger.error("acceptance: %s", failure)
        raise SystemExit(EXIT_CHECK)
    raise SystemExit(EXIT_OK)


if __name__ == "__main__":
    main()
