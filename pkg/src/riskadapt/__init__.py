"""Risk-based adaptive training for entity resolution."""

__version__ = "0.1.0"
