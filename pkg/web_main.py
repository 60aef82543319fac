"""Run dashboard entry point for ressl."""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

sys.path.insert(0, str(Path(__file__).parent / "src"))

from ressl.commands import FILE_FORMAT


def setup_logging(runs_root: Path):
    """Console plus ``<runs_root>/web.log`` when the runs directory exists."""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if runs_root.is_dir() and os.access(runs_root, os.W_OK):
        handlers.append(logging.FileHandler(runs_root / "web.log"))
    logging.basicConfig(level=logging.INFO, format=FILE_FORMAT, handlers=handlers, force=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ressl-web", description="Serve the ressl run dashboard")
    parser.add_argument("--host", default=os.getenv("WEB_HOST", "0.0.0.0"))
    parser.add_argument("--port", type=int, default=int(os.getenv("WEB_PORT", "5000")))
    parser.add_argument("--runs", default=os.getenv("RESSL_OUTPUT_ROOT", "./runs"),
                        help="directory holding one sub-directory per run")
    return parser


def main(argv: Optional[List[str]] = None):
    load_dotenv()
    args = build_parser().parse_args(argv)
    # the app resolves its runs directory from the environment at startup
    os.environ["RESSL_OUTPUT_ROOT"] = args.runs
    setup_logging(Path(args.runs))

    logging.info(f"Serving runs under {args.runs} on {args.host}:{args.port}")

    import uvicorn
    from web.server import app

    uvicorn.run(app, host=args.host, port=args.port, log_level="info")


if __name__ == "__main__":
    main()
