"""CLI utility to render a markdown summary from a calibration run directory."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from licalib.commands import EXIT_CHECK, EXIT_OK, cmd_report, configure_logging, exit_code_for
from licalib.errors import CalibrationError

logger = logging.getLogger("licalib.scripts.report")


def main() -> None:
    """CLI entrypoint."""

    parser = argparse.ArgumentParser(description="Render markdown summary and plot tables for a run.")
    parser.add_argument("--run-dir", required=True, help="Directory written by run_calibration.py")
    parser.add_argument("--dataset-dir", default=None, help="Dataset directory with ground_truth.json")
    parser.add_argument("--output-file", default=None, help="Markdown output (default: <run-dir>/summary.md)")
    parser.add_argument("--check", action="store_true", help="Exit 4 on ground-truth threshold failures")
    parser.add_argument("--log-level", default="INFO", help="Logging level")
    args = parser.parse_args()
    configure_logging(args.log_level)

    try:
        outcome = cmd_report(
            Path(args.run_dir),
            Path(args.dataset_dir) if args.dataset_dir else None,
            Path(args.output_file) if args.output_file else None,
        )
    except CalibrationError as exc:
        logger.error("%s", exc)
        raise SystemExit(exit_code_for(exc)) from exc
    print(outcome.markdown)
    print(f"Summary written: {outcome.summary_path.as_posix()}")
    if args.check and not outcome.passed:
        raise SystemExit(EXIT_CHECK)
    raise SystemExit(EXIT_OK)


if __name__ == "__main__":
    main()
