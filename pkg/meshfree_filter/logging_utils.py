from __future__ import annotations

from tqdm import tqdm


class DiagnosticLog:
    """Diagnostics sink that writes through tqdm so progress bars stay intact."""

    def __init__(self, enabled: bool = True, verbose: bool = False) -> None:
        self.enabled = enabled
        self.verbose = verbose

    def debug(self, msg: str) -> None:
        if self.enabled and self.verbose:
            tqdm.write(f"DEBUG: {msg}")

    def info(self, msg: str) -> None:
        if self.enabled:
            tqdm.write(msg)

    def warning(self, msg: str) -> None:
        if self.enabled:
            tqdm.write(f"WARNING: {msg}")

    def error(self, msg: str) -> None:
        if self.enabled:
            tqdm.write(f"ERROR: {msg}")


SILENT = DiagnosticLog(enabled=False)
