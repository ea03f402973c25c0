"""Recursive meta-learning with constraint-aware virtual-task exploration."""

from __future__ import annotations

__version__ = "0.1.0"
