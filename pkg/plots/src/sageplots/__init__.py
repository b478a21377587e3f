"""Offline figure renderer for exploration run logs."""

from .render import FIGURE_KINDS, render
from .schemas import EmptyLog, SchemaMismatch

__version__ = "0.1.0"

__all__ = ["FIGURE_KINDS", "render", "EmptyLog", "SchemaMismatch", "__version__"]
