"""Exception types shared across the package.

Shape problems raise DimensionError (a ValueError) whose message names both
offending shapes. Bad argument values raise plain ValueError. Misuse of
stateful objects (e.g. consuming a backward context twice) raises
RuntimeError.
"""

from __future__ import annotations


class DimensionError(ValueError):
    """A shape mismatch between two operands."""


def require_dims(ok: bool, what: str, left, right) -> None:
    """Raise DimensionError naming both shapes unless ``ok``."""
    if not ok:
        raise DimensionError(f"{what}: {tuple(left)} vs {tuple(right)}")
