"""Dual-condition ("reference only") diffusion at desk scale."""

__version__ = "0.1.0"
