"""MMA: a bidirectional state-space super-resolution network with its evaluation and attribution tools."""

__version__ = "0.1.0"
