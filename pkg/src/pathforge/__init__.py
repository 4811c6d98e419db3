"""Slide tiling, pseudo-epoch schedules, and gated-attention MIL benchmarking."""

__version__ = "0.1.0"
