"""Memory-system model for layer-pipelined CNN accelerators fed from HBM."""

__version__ = "0.1.0"
