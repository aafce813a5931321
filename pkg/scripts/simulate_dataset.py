"""CLI utility to simulate a LiDAR-IMU dataset with ground truth."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from licalib.commands import EXIT_OK, cmd_simulate, configure_logging, exit_code_for
from licalib.config import load_config, parse_cli_overrides
from licalib.errors import CalibrationError

logger = logging.getLogger("licalib.scripts.simulate")


def main() -> None:
    """CLI entrypoint."""

    parser = argparse.ArgumentParser(
        description="Simulate IMU and LiDAR data. Extra --section.key value pairs override config.yml."
    )
    parser.add_argument("--config", default=None, help="YAML config (default: repository config.yml)")
    parser.add_argument("--output-dir", default=None, help="Dataset directory (default: dataset.root)")
    parser.add_argument("--log-level", default="INFO", help="Logging level")
    args, extra = parser.parse_known_args()
    configure_logging(args.log_level)

    try:
        config = load_config(Path(args.config) if args.config else None, parse_cli_overrides(extra))
        output = cmd_simulate(config, Path(args.output_dir) if args.output_dir else None)
    except CalibrationError as exc:
        logger.error("%s", exc)
        raise SystemExit(exit_code_for(exc)) from exc
    print(f"Dataset written: {output.as_posix()}")
    raise SystemExit(EXIT_OK)


if __name__ == "__main__":
    main()
