"""Stream-based active learning with temporal predicted loss."""

__version__ = "0.1.0"
