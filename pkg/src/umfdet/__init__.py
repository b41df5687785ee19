"""Unified fake-news detection at desk scale: category-aware mixture
routing, attribution rationales with quality control, text fabrication
strategies, and a reproducible train/eval pipeline."""

__version__ = "0.1.0"

from .data import Category, NewsSample  # noqa: F401
from .errors import UmfdetError  # noqa: F401
