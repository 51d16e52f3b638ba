"""Differentiable rasterizer for fixed-width 2D cubic Bezier strokes.

Strokes are drawn as black ink on a white canvas. Per-pixel coverage is a
smoothstep of the distance to the curve; strokes composite multiplicatively
(order-free transparency). The backward pass treats the nearest-point
parameter t* as fixed (envelope theorem), which is exact at the minimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

SUBDIV_TOL = 0.05  # polyline flatness tolerance, px
NEWTON_ITERS = 8
DEFAULT_WIDTH = 3.0  # px at 400x400, scale proportionally with resolution
DEFAULT_SOFTNESS = 1.0  # px transition band


def default_stroke_width(resolution: int) -> float:
    return DEFAULT_WIDTH * resolution / 400.0


@dataclass
class ImageBuffer:
    """Row-major grayscale float image. Rendered sketches live in [0, 1]
    (white = 1.0); gradient buffers are unconstrained."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("ImageBuffer data must be 2D (height, width)")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @classmethod
    def white(cls, height: int, width: int) -> "ImageBuffer":
        return cls(np.ones((height, width)))

    @classmethod
    def zeros(cls, height: int, width: int) -> "ImageBuffer":
        return cls(np.zeros((height, width)))


@dataclass
class Stroke2D:
    """Pixel-space cubic Bezier stroke; width is shared by all strokes in a render."""

    q: np.ndarray  # (4, 2) control points
    width: float = DEFAULT_WIDTH

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4, 2)
        if not np.all(np.isfinite(self.q)):
            raise ValueError("non-finite control points")
        if not self.width > 0:
            raise ValueError("stroke width must be positive")


# ---------------------------------------------------------------------------
# Bezier evaluation on arrays (numpy, detached machinery)


def _bezier_batch(cp: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Curve points for parameters t; cp (4, 2), t (N,) -> (N, 2)."""
    s = 1.0 - t
    b = np.stack([s**3, 3 * s**2 * t, 3 * s * t**2, t**3], axis=1)
    return b @ cp


def _bezier_d1(cp: np.ndarray, t: np.ndarray) -> np.ndarray:
    d = 3.0 * np.diff(cp, axis=0)  # (3, 2)
    s = 1.0 - t
    b = np.stack([s**2, 2 * s * t, t**2], axis=1)
    return b @ d


def _bezier_d2(cp: np.ndarray, t: np.ndarray) -> np.ndarray:
    dd = 6.0 * (cp[2:] - 2 * cp[1:3] + cp[:2])  # (2, 2)
    b = np.stack([1.0 - t, t], axis=1)
    return b @ dd


def _subdivide(cp: np.ndarray, tol: float = SUBDIV_TOL, max_depth: int = 16):
    """Adaptive de Casteljau subdivision to a polyline.

    Returns (points (M, 2), params (M,)) with points[i] = B(params[i]).
    """
    out_pts = [cp[0]]
    out_ts = [0.0]
    stack = [(cp, 0.0, 1.0, 0)]
    while stack:
        c, t0, t1, depth = stack.pop()
        chord = c[3] - c[0]
        L = np.hypot(*chord)
        if L < 1e-12:
            flat = max(np.linalg.norm(c[1] - c[0]), np.linalg.norm(c[2] - c[0]))
        else:
            n = chord / L
            d1 = c[1] - c[0]
            d2 = c[2] - c[0]
            flat = max(
                abs(d1[0] * n[1] - d1[1] * n[0]),
                abs(d2[0] * n[1] - d2[1] * n[0]),
                # control points beyond the chord ends also bound the error
                max(0.0, -d1 @ n, d1 @ n - L, -d2 @ n, d2 @ n - L),
            )
        if flat <= tol or depth >= max_depth:
            out_pts.append(c[3])
            out_ts.append(t1)
            continue
        m01 = 0.5 * (c[0] + c[1])
        m12 = 0.5 * (c[1] + c[2])
        m23 = 0.5 * (c[2] + c[3])
        m012 = 0.5 * (m01 + m12)
        m123 = 0.5 * (m12 + m23)
        mid = 0.5 * (m012 + m123)
        tm = 0.5 * (t0 + t1)
        # push right first so the left half is processed first (ordered output)
        stack.append((np.stack([mid, m123, m23, c[3]]), tm, t1, depth + 1))
        stack.append((np.stack([c[0], m01, m012, mid]), t0, tm, depth + 1))
    return np.stack(out_pts), np.array(out_ts)


def _nearest_params(cp: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Initial curve parameters: nearest point on the subdivided polyline."""
    pts, ts = _subdivide(cp)
    A = pts[:-1]  # (S, 2)
    AB = pts[1:] - pts[:-1]
    denom = np.maximum(np.einsum("sd,sd->s", AB, AB), 1e-18)
    # (N, S) projections of every query point onto every segment
    ap = points[:, None, :] - A[None, :, :]
    s = np.clip(np.einsum("nsd,sd->ns", ap, AB) / denom, 0.0, 1.0)
    closest = A[None] + s[..., None] * AB[None]
    d2 = np.sum((points[:, None, :] - closest) ** 2, axis=2)
    seg = np.argmin(d2, axis=1)
    srun = s[np.arange(len(points)), seg]
    return ts[seg] + srun * (ts[seg + 1] - ts[seg])


def _newton_refine(cp: np.ndarray, points: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Refine nearest-point parameters by Newton on (B(t)-p)·B'(t) = 0."""
    for _ in range(NEWTON_ITERS):
        diff = _bezier_batch(cp, t) - points
        d1 = _bezier_d1(cp, t)
        d2 = _bezier_d2(cp, t)
        f = np.einsum("nd,nd->n", diff, d1)
        fp = np.einsum("nd,nd->n", d1, d1) + np.einsum("nd,nd->n", diff, d2)
        step = np.where(fp > 1e-12, f / np.where(fp > 1e-12, fp, 1.0), 0.0)
        t = np.clip(t - step, 0.0, 1.0)
    return t


def distance_to_cubic(q0, q1, q2, q3, pixel) -> tuple[float, float]:
    """Minimum distance from a point to a cubic Bezier and the minimizing t."""
    cp = np.asarray([q0, q1, q2, q3], dtype=np.float64).reshape(4, 2)
    p = np.asarray(pixel, dtype=np.float64).reshape(1, 2)
    t = _newton_refine(cp, p, _nearest_params(cp, p))
    # Newton can drift to a worse stationary point; keep the better candidate
    # and always consider the endpoints.
    cand = np.concatenate([t, [0.0, 1.0]])
    d = np.linalg.norm(_bezier_batch(cp, cand) - p, axis=1)
    best = int(np.argmin(d))
    return float(d[best]), float(cand[best])


# ---------------------------------------------------------------------------
# Rasterization


def _band_pixels(cp: np.ndarray, shape: tuple[int, int], radius: float):
    """Integer pixel coords within ``radius`` of the curve's polyline."""
    h, w = shape
    pts, _ = _subdivide(cp)
    mask = np.zeros(shape, dtype=bool)
    r = radius + 1.0  # half-pixel center offset plus slack
    for a, b in zip(pts[:-1], pts[1:]):
        x0 = int(np.floor(min(a[0], b[0]) - r))
        x1 = int(np.ceil(max(a[0], b[0]) + r))
        y0 = int(np.floor(min(a[1], b[1]) - r))
        y1 = int(np.ceil(max(a[1], b[1]) + r))
        if x1 < 0 or y1 < 0 or x0 >= w or y0 >= h:
            continue
        mask[max(y0, 0) : min(y1 + 1, h), max(x0, 0) : min(x1 + 1, w)] = True
    ys, xs = np.nonzero(mask)
    centers = np.stack([xs + 0.5, ys + 0.5], axis=1)
    return ys, xs, centers


def _resolve_width(strokes: list[Stroke2D], width: float | None) -> float:
    if width is not None:
        return float(width)
    w = strokes[0].width
    if any(abs(s.width - w) > 1e-12 for s in strokes):
        raise ValueError("strokes must share one width per render")
    return float(w)


def _coverage_np(d: np.ndarray, width: float, softness: float) -> np.ndarray:
    s = np.clip((d - width / 2.0) / softness, 0.0, 1.0)
    return 1.0 - (3.0 * s**2 - 2.0 * s**3)


def rasterize_strokes(
    strokes: list[Stroke2D],
    shape: tuple[int, int],
    width: float | None = None,
    softness: float = DEFAULT_SOFTNESS,
) -> ImageBuffer:
    """Render strokes to a white canvas of (height, width) pixels.

    Pixel value is the product over strokes of (1 - coverage): multiplicative
    transparency, independent of stroke order.
    """
    h, w = shape
    img = np.ones((h, w))
    if not strokes:
        return ImageBuffer(img)
    sw = _resolve_width(strokes, width)
    for stroke in strokes:
        ys, xs, centers = _band_pixels(stroke.q, shape, sw / 2.0 + softness)
        if len(ys) == 0:
            continue
        t = _newton_refine(stroke.q, centers, _nearest_params(stroke.q, centers))
        d = np.linalg.norm(_bezier_batch(stroke.q, t) - centers, axis=1)
        img[ys, xs] *= 1.0 - _coverage_np(d, sw, softness)
    return ImageBuffer(img)


def _forward_torch(
    strokes: list[Stroke2D],
    shape: tuple[int, int],
    width: float,
    softness: float,
):
    """Differentiable forward pass; returns (image tensor, list of leaf cp tensors)."""
    h, w = shape
    leaves = []
    factors = []
    for stroke in strokes:
        cp_t = torch.tensor(stroke.q, dtype=torch.float64, requires_grad=True)
        leaves.append(cp_t)
        ys, xs, centers = _band_pixels(stroke.q, shape, width / 2.0 + softness)
        if len(ys) == 0:
            factors.append(None)
            continue
        t = _newton_refine(stroke.q, centers, _nearest_params(stroke.q, centers))
        tt = torch.tensor(t)
        s_ = 1.0 - tt
        basis = torch.stack([s_**3, 3 * s_**2 * tt, 3 * s_ * tt**2, tt**3], dim=1)
        pts = basis @ cp_t
        d = torch.norm(pts - torch.tensor(centers), dim=1)
        sarg = torch.clamp((d - width / 2.0) / softness, 0.0, 1.0)
        coverage = 1.0 - (3.0 * sarg**2 - 2.0 * sarg**3)
        factor = torch.ones(h * w, dtype=torch.float64).index_put(
            (torch.tensor(ys * w + xs),), 1.0 - coverage
        )
        factors.append(factor.view(h, w))
    live = [f for f in factors if f is not None]
    if live:
        img = torch.stack(live).prod(dim=0)
    else:
        img = torch.ones(h, w, dtype=torch.float64)
    return img, leaves


def rasterize_strokes_backward(
    strokes: list[Stroke2D],
    shape: tuple[int, int],
    grad_out: ImageBuffer,
    width: float | None = None,
    softness: float = DEFAULT_SOFTNESS,
) -> list[np.ndarray]:
    """Gradient of the rendered image w.r.t. each stroke's control points.

    Returns one (4, 2) array per stroke for the scalar sum(grad_out * image).
    """
    if grad_out.shape != tuple(shape):
        raise ValueError("grad_out dims must match canvas dims")
    if not strokes:
        return []
    sw = _resolve_width(strokes, width)
    img, leaves = _forward_torch(strokes, shape, sw, softness)
    img.backward(torch.tensor(grad_out.data))
    return [
        leaf.grad.numpy() if leaf.grad is not None else np.zeros((4, 2))
        for leaf in leaves
    ]
