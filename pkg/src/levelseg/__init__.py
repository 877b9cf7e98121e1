"""Differentiable level-set segmentation with learned per-pixel energy weights."""

__version__ = "0.1.0"

__all__ = ["acm", "autodiff", "cli", "fields", "losses", "maps", "metrics", "synth", "trainer"]
