import logging

from rich.console import Console
from rich.logging import RichHandler

console = Console()


def setup_logging(level="INFO"):
    """Route library logging through rich. Safe to call more than once."""
    root = logging.getLogger("pptfl")
    root.setLevel(level)
    if not any(isinstance(h, RichHandler) for h in root.handlers):
        handler = RichHandler(console=console, show_path=False, rich_tracebacks=True)
        handler.setFormatter(logging.Formatter("%(message)s"))
        root.addHandler(handler)
    return root
