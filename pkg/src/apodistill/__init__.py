"""Multi-teacher distillation with drift detection and autonomous preference optimization."""

__version__ = "0.1.0"
