"""Test-time adaptation of frame-wise segmenters into temporally coherent video segmenters."""

__version__ = "0.1.0"
