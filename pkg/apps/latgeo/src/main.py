"""Command-line entry point for the latgeo captioning pipeline."""

import argparse
import logging
import sys
from typing import Optional, Sequence

from src.api.commands import COMMAND_MODULES
from src.core.config import get_settings
from src.core.exceptions import EmbeddingIndexError, LatgeoError

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_STORAGE = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(
        prog="latgeo",
        description="Geometry- and label-attention image captioning on synthetic scenes",
    )
    parser.add_argument("--version", action="version", version=f"{settings.app_name} {settings.app_version}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for module in COMMAND_MODULES:
        module.register(subparsers)
    return parser


def configure_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else get_settings().log_level
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments, run one command and map failures to exit codes:
    0 success, 1 input error, 2 numeric failure, 3 I/O error.
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)

    try:
        return args.handler(args)
    except LatgeoError as e:
        logger.error(f"{args.command} failed: {e}")
        logger.debug("Traceback", exc_info=True)
        return e.exit_code
    except EmbeddingIndexError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_NUMERIC
    except OSError as e:
        logger.error(f"{args.command} failed with an I/O error: {e}")
        return EXIT_STORAGE


if __name__ == "__main__":
    sys.exit(main())
