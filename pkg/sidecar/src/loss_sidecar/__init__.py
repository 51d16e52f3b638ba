"""Perceptual-loss sidecar: LPIPS and CLIP image losses over a binary protocol."""

__version__ = "0.1.0"
