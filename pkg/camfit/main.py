"""
Command-line entry point for camfit
"""

import argparse
import logging
import sys
from typing import List, Optional

from . import __version__
from .cli.commands import router, run_command
from .config import get_config
from .core.errors import CamfitError, InputError

logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors are raised as InputError instead of exiting; subcommand parsers inherit this"""

    def error(self, message: str):
        raise InputError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = ArgumentParser(
        prog="camfit",
        description="Camera poses, focal length and flow uncertainty from depth and optical flow",
    )
    parser.add_argument("--version", action="version", version=f"camfit {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    router.install(subparsers)
    return parser


def report_error(exc: BaseException) -> int:
    """Global exception handler: one machine-parsable line on stderr and an exit code"""
    if isinstance(exc, CamfitError):
        kind, code = exc.kind, exc.exit_code
    else:
        logger.debug("unhandled exception", exc_info=exc)
        kind, code = "internal", 2
    message = " ".join(str(exc).split()) or type(exc).__name__
    print(f"camfit-error[{kind}]: {message}", file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    config = get_config()
    config.configure_logging()
    config.apply_threads()

    try:
        args = build_parser().parse_args(argv)
        manifest = run_command(args)
    except Exception as exc:
        return report_error(exc)
    logger.info("%s finished; %d artifacts in %s", args.command, len(manifest.artifacts), args.out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
