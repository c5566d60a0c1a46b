"""Environment-driven switches shared by every module."""
from __future__ import annotations

import os

DEFAULT_MAX_LEVEL = 12
MAX_LEVEL_ENV = "FRACTAL_CONTROL_MAX_LEVEL"
NUMBA_ENV = "FRACTAL_CONTROL_NUMBA"

# exact rationals are used up to this level, floats beyond
EXACT_LEVEL_LIMIT = 8


def max_level() -> int:
    raw = os.environ.get(MAX_LEVEL_ENV)
    if raw is None or raw == "":
        return DEFAULT_MAX_LEVEL
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{MAX_LEVEL_ENV} must be an integer, got {raw!r}") from None


def numba_enabled() -> bool:
    """True unless FRACTAL_CONTROL_NUMBA is set to 0/false/no/off, or numba is missing."""
    raw = os.environ.get(NUMBA_ENV, "1").strip().lower()
    if raw in ("0", "false", "no", "off"):
        return False
    try:
        import numba  # noqa: F401
    except ImportError:  # pragma: no cover
        return False
    return True


class ResourceLimitError(ValueError):
    """Requested size exceeds a configured guard."""
