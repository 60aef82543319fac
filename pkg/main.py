"""ressl - command-line entry point."""

import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

sys.path.insert(0, str(Path(__file__).parent / "src"))

from ressl.commands import run_cli


def setup_logging(level: int = logging.INFO):
    """Configure console logging; run commands add a file handler in the run directory."""
    # Custom formatter for clean, readable output
    class CleanFormatter(logging.Formatter):
        """Custom formatter with colors and clean layout."""

        COLORS = {
            'DEBUG': '\033[36m',      # Cyan
            'INFO': '\033[32m',       # Green
            'WARNING': '\033[33m',    # Yellow
            'ERROR': '\033[31m',      # Red
            'CRITICAL': '\033[35m',   # Magenta
        }
        RESET = '\033[0m'
        BOLD = '\033[1m'

        def format(self, record):
            logger_name = record.name.replace('ressl.', '')
            level_color = self.COLORS.get(record.levelname, '')
            level = f"{level_color}{record.levelname:<8}{self.RESET}"
            timestamp = self.formatTime(record, '%H:%M:%S')
            msg = f"{self.BOLD}{timestamp}{self.RESET} {level} {logger_name:<12} {record.getMessage()}"

            if record.exc_info:
                msg += '\n' + self.formatException(record.exc_info)

            return msg

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(CleanFormatter())

    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    root_logger.handlers.clear()
    root_logger.addHandler(console_handler)

    # Reduce third-party verbosity
    logging.getLogger('PIL').setLevel(logging.WARNING)
    logging.getLogger('urllib3').setLevel(logging.WARNING)


def main(argv: Optional[List[str]] = None):
    setup_logging()
    load_dotenv()

    logger = logging.getLogger('main')

    try:
        return run_cli(argv)
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return 130
    except Exception as e:
        logger.error(f"Fatal error: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    exit(main())
