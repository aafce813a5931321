"""CLI utility to rank dataset segments by extrinsic observability."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from licalib.commands import EXIT_OK, SEGMENTS_FILE, cmd_select_segments, configure_logging, exit_code_for
from licalib.config import load_config, parse_cli_overrides
from licalib.errors import CalibrationError

logger = logging.getLogger("licalib.scripts.segments")


def main() -> None:
    """CLI entrypoint."""

    parser = argparse.ArgumentParser(
        description="Rank fixed-length segments and optionally calibrate the best ones jointly."
    )
    parser.add_argument("--config", default=None, help="YAML config (default: repository config.yml)")
    parser.add_argument("--dataset-dir", default=None, help="Dataset directory (default: dataset.root)")
    parser.add_argument("--output-dir", default=None, help="Run directory (default: dataset.output_dir)")
    parser.add_argument("--joint", action="store_true", help="Jointly calibrate the selected segments")
    parser.add_argument("--log-level", default="INFO", help="Logging level")
    args, extra = parser.parse_known_args()
    configure_logging(args.log_level)

    try:
        overrides = parse_cli_overrides(extra)
        if args.joint:
            overrides.setdefault("segments", {})["joint_calibration"] = True
        config = load_config(Path(args.config) if args.config else None, overrides)
        output_dir = Path(args.output_dir or config.dataset.output_dir)
        dataset_dir = Path(args.dataset_dir) if args.dataset_dir else None
        ranking = cmd_select_segments(config, dataset_dir, output_dir)
    except CalibrationError as exc:
        logger.error("%s", exc)
        raise SystemExit(exit_code_for(exc)) from exc
    for segment in ranking.segments:
        flag = "informative" if segment.informative else "weak"
        print(f"segment {segment.index}: sigma_min={segment.min_singular_value:.4g} ({flag})")
    print(f"Segment ranking written: {(output_dir / SEGMENTS_FILE).as_posix()}")
    raise SystemExit(EXIT_OK)


if __name__ == "__main__":
    main()
