"""Slide-text alignment on synthetic whole-slide images: tiling, Q-Former training, grafted generation, evaluation."""

__version__ = "0.1.0"
