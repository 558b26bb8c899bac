# forceadapt/log.py
import logging
import sys
from typing import Iterable, Optional, TypeVar

from rich.console import Console
from rich.logging import RichHandler
from tqdm import tqdm

T = TypeVar("T")

_configured = False


def setup_logging(level: Optional[str] = None) -> None:
    """Installs a single RichHandler on the `forceadapt` logger tree."""
    global _configured
    from .config import get_settings

    level = (level or get_settings().log_level).upper()
    root = logging.getLogger("forceadapt")
    root.setLevel(level)
    if _configured:
        return
    handler = RichHandler(
        console=Console(stderr=True),
        show_path=False,
        rich_tracebacks=True,
        log_time_format="[%X]",
    )
    handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
    root.addHandler(handler)
    root.propagate = False
    _configured = True


def progress(iterable: Iterable[T], desc: str, total: Optional[int] = None) -> Iterable[T]:
    """tqdm wrapper honouring the FORCEADAPT_PROGRESS setting."""
    from .config import get_settings

    disable = not get_settings().progress or not sys.stderr.isatty()
    return tqdm(iterable, desc=desc, total=total, disable=disable, leave=False)
