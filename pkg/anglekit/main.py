"""
anglekit entry point.

Dispatches `anglekit <command>` to the CLI: synthetic data generation, half
preparation, classifier and two-stage localizer training, prediction,
evaluation and reporting.
"""
import logging
import sys
from typing import Optional, Sequence

from anglekit.cli import run
from anglekit.settings import configure_logging

logger = logging.getLogger('anglekit_main')


def start_service(argv: Optional[Sequence[str]] = None) -> int:
    """Run one CLI invocation and return its exit code."""
    configure_logging()
    try:
        logger.debug("Starting anglekit")
        return run(argv)
    except Exception as e:
        logger.critical(f"anglekit failed: {str(e)}", exc_info=True)
        return 2
    finally:
        logger.debug("anglekit shutting down")


def main() -> None:
    sys.exit(start_service())


if __name__ == "__main__":
    main()
