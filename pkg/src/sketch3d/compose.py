"""Combine view-independent (stroke) and view-dependent (contour) renders.

The union of ink is the product of transparencies: commutative, associative,
identity on an all-white branch, and smooth everywhere.
"""

from __future__ import annotations

from .raster2d import ImageBuffer


def composite(ind: ImageBuffer, dep: ImageBuffer) -> ImageBuffer:
    """Pixelwise product of the two branch renders."""
    if ind.shape != dep.shape:
        raise ValueError(f"dimension mismatch: {ind.shape} vs {dep.shape}")
    return ImageBuffer(ind.data * dep.data)


def composite_backward(
    ind: ImageBuffer, dep: ImageBuffer, grad_out: ImageBuffer
) -> tuple[ImageBuffer, ImageBuffer]:
    """Product rule: gradients routed to each branch."""
    if ind.shape != dep.shape or grad_out.shape != ind.shape:
        raise ValueError("dimension mismatch")
    return ImageBuffer(grad_out.data * dep.data), ImageBuffer(grad_out.data * ind.data)
