"""Package version, read from the same file ``setup.py`` reads."""

import functools
from pathlib import Path


@functools.lru_cache(maxsize=None)
def code_version() -> str:
    return (Path(__file__).parent.parent / "__version__.txt").read_text(encoding="utf-8").strip()
