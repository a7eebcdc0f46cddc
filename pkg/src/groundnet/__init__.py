"""Syntax-driven grounding of referring expressions over bounding boxes."""

__version__ = "0.1.0"
