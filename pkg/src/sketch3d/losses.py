"""Loss composition: robust-wrapped structural term plus semantic term.

A pluggable perceptual backend supplies both terms with gradients w.r.t.
the rendered image; built-in geometric backends (pixel L2, distance
transform) let the optimizer run with no external service attached.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .raster2d import ImageBuffer

ROBUST_ALPHA = 1.0
ROBUST_C = 0.1
BACKENDS = ("pixel-l2", "distance-transform", "sidecar-perceptual")


class BackendError(RuntimeError):
    """A perceptual backend failed while scoring a view."""

    def __init__(self, view_index: int, cause: Exception):
        super().__init__(f"backend failed on view {view_index}: {cause}")
        self.view_index = view_index


@dataclass
class LossConfig:
    """apply_robust None means: wrap structural loss in rho unless the scene
    is curves-only (resolved by the optimizer)."""

    lambda_weight: float = 1.0
    robust_alpha: float = ROBUST_ALPHA
    robust_c: float = ROBUST_C
    backend: str = "pixel-l2"
    apply_robust: bool | None = None

    def __post_init__(self):
        if self.lambda_weight < 0:
            raise ValueError("lambda must be >= 0")
        if not self.robust_c > 0:
            raise ValueError("robust c must be positive")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")


def robust_loss(x: float, alpha: float, c: float) -> float:
    """General robust penalty; alpha interpolates from L2 (2) through
    pseudo-Huber (1) to heavier-tailed penalties (0 and below)."""
    if not c > 0:
        raise ValueError("c must be positive")
    u = (x / c) ** 2
    if alpha == 2.0:
        return 0.5 * u
    if alpha == 0.0:
        return float(np.log1p(0.5 * u))
    am2 = abs(alpha - 2.0)
    return am2 / alpha * ((u / am2 + 1.0) ** (alpha / 2.0) - 1.0)


def robust_loss_deriv(x: float, alpha: float, c: float) -> float:
    """d robust_loss / dx; shares the closed form across alpha branches."""
    if not c > 0:
        raise ValueError("c must be positive")
    if alpha == 2.0:
        return x / c**2
    u = (x / c) ** 2
    return (x / c**2) * (u / abs(alpha - 2.0) + 1.0) ** (alpha / 2.0 - 1.0)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cosine similarity, in [0, 2]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine distance undefined for zero vectors")
    return float(1.0 - a @ b / (na * nb))


def pixel_l2(target: ImageBuffer, render: ImageBuffer) -> tuple[float, ImageBuffer]:
    """Mean squared pixel difference and its gradient w.r.t. the render."""
    if target.shape != render.shape:
        raise ValueError("dimension mismatch")
    diff = render.data - target.data
    n = diff.size
    return float(np.mean(diff**2)), ImageBuffer(2.0 * diff / n)


def distance_transform_loss(
    target_edges: ImageBuffer, render: ImageBuffer
) -> tuple[float, ImageBuffer]:
    """Ink-weighted mean distance of rendered ink to the target edge set.

    target_edges is a binary edge map; the loss is sum(ink * DT) / sum(ink)
    with ink = 1 - pixel, DT the Euclidean distance transform of the edges.
    """
    if target_edges.shape != render.shape:
        raise ValueError("dimension mismatch")
    edges = target_edges.data > 0.5
    if not edges.any():
        raise ValueError("target edge map has no edge pixels")
    dt = ndimage.distance_transform_edt(~edges)
    ink = 1.0 - render.data
    denom = float(ink.sum())
    if denom <= 1e-12:
        return 0.0, ImageBuffer(np.zeros(render.shape))
    loss = float((ink * dt).sum() / denom)
    # quotient rule; d ink / d pixel = -1
    grad = (loss - dt) / denom
    return loss, ImageBuffer(grad)


class PerceptualBackend:
    """Backend contract: structural and semantic terms with render-gradients.

    Backends may serialize access internally; the loss layer issues at most
    ``max_concurrency`` concurrent requests (all built-ins are sequential).
    """

    max_concurrency = 1

    def structural(self, target: ImageBuffer, render: ImageBuffer):
        raise NotImplementedError

    def semantic(self, target: ImageBuffer, render: ImageBuffer):
        raise NotImplementedError


def _image_cosine(target: ImageBuffer, render: ImageBuffer) -> tuple[float, ImageBuffer]:
    """Cosine distance between flattened images, with gradient w.r.t. render."""
    a = target.data.reshape(-1)
    b = render.data.reshape(-1)
    if np.array_equal(a, b):
        # exact self-match: the true gradient is zero; avoid cancellation
        # noise that a rescaling optimizer would amplify into drift
        return 0.0, ImageBuffer(np.zeros(render.shape))
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine semantic term undefined for all-zero images")
    cos = float(a @ b / (na * nb))
    grad = -a / (na * nb) + cos * b / nb**2
    return 1.0 - cos, ImageBuffer(grad.reshape(render.shape))


class PixelL2Backend(PerceptualBackend):
    """Stand-in backend: L2 structural term, image-cosine semantic term."""

    def structural(self, target, render):
        return pixel_l2(target, render)

    def semantic(self, target, render):
        return _image_cosine(target, render)


class DistanceTransformBackend(PerceptualBackend):
    """Edge-based backend: structural = pixel L2 plus a weighted chamfer-style
    distance-transform pull toward the target's ink (threshold ink > 0.5).
    Distance transforms are cached per target buffer.
    """

    def __init__(self, dt_weight: float = 0.01):
        self.dt_weight = dt_weight
        self._edge_cache: dict[int, ImageBuffer] = {}

    def _edges(self, target: ImageBuffer) -> ImageBuffer:
        key = id(target.data)
        if key not in self._edge_cache:
            self._edge_cache[key] = ImageBuffer((1.0 - target.data > 0.5).astype(np.float64))
        return self._edge_cache[key]

    def structural(self, target, render):
        l2, g2 = pixel_l2(target, render)
        dt, gdt = distance_transform_loss(self._edges(target), render)
        return l2 + self.dt_weight * dt, ImageBuffer(g2.data + self.dt_weight * gdt.data)

    def semantic(self, target, render):
        return _image_cosine(target, render)


def total_loss(
    views: list[tuple[ImageBuffer, ImageBuffer]],
    cfg: LossConfig,
    backend: PerceptualBackend,
) -> tuple[float, list[ImageBuffer]]:
    """Sum over views of lambda * rho(structural) + semantic.

    Returns the scalar loss and, per view, the gradient image w.r.t. the
    render (chain rule applies rho' to the structural gradient).
    """
    total = 0.0
    grads = []
    for i, (target, render) in enumerate(views):
        try:
            s_val, s_grad = backend.structural(target, render)
            m_val, m_grad = backend.semantic(target, render)
        except Exception as e:  # noqa: BLE001 - annotate failing view
            raise BackendError(i, e) from e
        lam = cfg.lambda_weight
        if cfg.apply_robust is not False:  # None resolves to robust-on here
            total += lam * robust_loss(s_val, cfg.robust_alpha, cfg.robust_c) + m_val
            rprime = robust_loss_deriv(s_val, cfg.robust_alpha, cfg.robust_c)
            grads.append(ImageBuffer(lam * rprime * s_grad.data + m_grad.data))
        else:
            total += lam * s_val + m_val
            grads.append(ImageBuffer(lam * s_grad.data + m_grad.data))
    return total, grads
