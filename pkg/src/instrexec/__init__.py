"""Zero-shot instruction execution: parameterized skills driven by a hierarchical meta controller."""

__version__ = "0.1.0"
