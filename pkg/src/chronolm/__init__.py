"""Per-period language models for studying diachronic change."""

__version__ = "0.1.0"
