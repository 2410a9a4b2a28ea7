"""
ILNET tracker entry point
Subcommands: track, bench, verify, synth
"""
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(name)s: %(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=True)],
        force=True,
    )


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()  # reads .env in the cwd/project root

    import path_utils
    path_utils.refresh_roots()

    from cli_bench import build_parser, dispatch

    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    return dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
