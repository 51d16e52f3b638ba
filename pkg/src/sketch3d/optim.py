"""Initialization, Adam, and the two-stage optimization loop.

Stage 1 updates only superquadric parameters, stage 2 only curve control
points; the frozen branch's renders are cached per view. Identical seed,
config, and thread count reproduce the loss history bit for bit.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import geometry as geo
from .compose import composite, composite_backward
from .contour import ContourConfig, render_contour, render_contour_backward, render_contour_cached
from .losses import (
    DistanceTransformBackend,
    LossConfig,
    PerceptualBackend,
    PixelL2Backend,
    total_loss,
)
from .raster2d import ImageBuffer, Stroke2D, default_stroke_width, rasterize_strokes, rasterize_strokes_backward
from .scene import ParamGradient, StrokeSet, pack_params, unpack_params

logger = logging.getLogger(__name__)

STAGE_QUADRICS = "quadrics-phase"
STAGE_CURVES = "curves-phase"
STAGE_JOINT = "joint"


class NumericalAbort(RuntimeError):
    """Optimization hit a non-finite loss or gradient."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"numerical abort at step {step}: {detail}")
        self.step = step


@dataclass
class ParamBounds:
    alpha_min: float = geo.ALPHA_MIN
    alpha_max: float = geo.ALPHA_MAX
    eps_min: float = geo.EPS_MIN
    eps_max: float = geo.EPS_MAX


@dataclass
class OptState:
    """Flat Adam state over the StrokeSet parameter layout."""

    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int
    stage: str
    n_ind: int
    n_dep: int

    @classmethod
    def init(cls, strokes: StrokeSet, stage: str = STAGE_JOINT) -> "OptState":
        p = pack_params(strokes)
        return cls(p, np.zeros_like(p), np.zeros_like(p), 0, stage, strokes.n_ind, strokes.n_dep)


def _project_constraints(
    params: np.ndarray,
    n_ind: int,
    n_dep: int,
    bounds: ParamBounds,
    update_mask: np.ndarray | None = None,
):
    """Clamp shape parameters into bounds and renormalize quaternions.

    Only quadrics the step updated are touched, so frozen-stage parameters
    stay bitwise identical.
    """
    base = 12 * n_ind
    for i in range(n_dep):
        o = base + 12 * i
        if update_mask is not None and not update_mask[o : o + 12].any():
            continue
        np.clip(params[o : o + 3], bounds.alpha_min, bounds.alpha_max, out=params[o : o + 3])
        np.clip(params[o + 3 : o + 5], bounds.eps_min, bounds.eps_max, out=params[o + 3 : o + 5])
        q = params[o + 5 : o + 9]
        q /= np.linalg.norm(q)


def adam_step(
    state: OptState,
    grad: ParamGradient,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_adam: float = 1e-8,
    bounds: ParamBounds | None = None,
    update_mask: np.ndarray | None = None,
) -> OptState:
    """One Adam update with bias correction, then constraint projection.

    ``update_mask`` freezes parameters outside the current stage; frozen
    entries see zero gradient, so their moments and values never move.
    """
    g = grad.data
    if g.shape != state.params.shape:
        raise ValueError("gradient length mismatch")
    if not np.all(np.isfinite(g)):
        raise NumericalAbort(state.step, "non-finite gradient")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    delta = lr * m_hat / (np.sqrt(v_hat) + eps_adam)
    if update_mask is not None:
        # frozen parameters keep their exact values and their moments:
        # leftover momentum from an earlier stage must not leak updates
        m = np.where(update_mask, m, state.m)
        v = np.where(update_mask, v, state.v)
        delta = np.where(update_mask, delta, 0.0)
    params = state.params - delta
    _project_constraints(params, state.n_ind, state.n_dep, bounds or ParamBounds(), update_mask)
    return OptState(params, m, v, t, state.stage, state.n_ind, state.n_dep)


def quadric_mask(n_ind: int, n_dep: int) -> np.ndarray:
    mask = np.zeros(12 * n_ind + 12 * n_dep, dtype=bool)
    mask[12 * n_ind :] = True
    return mask


def curve_mask(n_ind: int, n_dep: int) -> np.ndarray:
    mask = np.zeros(12 * n_ind + 12 * n_dep, dtype=bool)
    mask[: 12 * n_ind] = True
    return mask


# ---------------------------------------------------------------------------
# Initialization


def fps_sample(points: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; the first point is a seeded uniform
    draw and ties break to the lowest index."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n < 1:
        raise ValueError("need at least one point")
    if k > n:
        raise ValueError(f"cannot sample {k} from {n} points")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(d))  # argmax takes the first maximum: lowest index
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(pts - pts[nxt], axis=1))
    return pts[chosen]


INIT_METHODS = ("random-bbox", "fps-points", "line-segments")
QUADRIC_SCALE_FRAC = 0.15  # isotropic alpha as a fraction of bbox diagonal
CURVE_JITTER_FRAC = 0.02


def _default_quadric(center: np.ndarray, diag: float, bounds: ParamBounds) -> geo.Superquadric:
    a = float(np.clip(QUADRIC_SCALE_FRAC * diag, bounds.alpha_min, bounds.alpha_max))
    return geo.Superquadric(alpha=(a, a, a), epsilon=(1.0, 1.0), translation=center)


def init_strokes(dataset, n_ind: int, n_dep: int, method: str, seed: int = 0) -> StrokeSet:
    """Build an initial StrokeSet from the dataset's points/segments/bbox."""
    if method not in INIT_METHODS:
        raise ValueError(f"unknown init method {method!r}")
    if n_ind + n_dep < 1:
        raise ValueError("need at least one primitive")
    lo, hi = dataset.bbox
    diag = float(np.linalg.norm(np.asarray(hi) - np.asarray(lo)))
    rng = np.random.default_rng(seed)
    bounds = ParamBounds()
    curves: list[geo.CubicBezier3D] = []
    quadrics: list[geo.Superquadric] = []

    if method == "random-bbox":
        for _ in range(n_ind):
            cp = rng.uniform(lo, hi, size=(4, 3))
            curves.append(geo.CubicBezier3D(*cp))
        for _ in range(n_dep):
            quadrics.append(_default_quadric(rng.uniform(lo, hi), diag, bounds))
    elif method == "fps-points":
        if dataset.points is None or len(dataset.points) == 0:
            raise ValueError("fps-points init requires a point cloud")
        pts = np.asarray(dataset.points)
        if n_ind:
            seeds = fps_sample(pts, n_ind, seed)
            for s in seeds:
                jitter = rng.normal(0.0, CURVE_JITTER_FRAC * diag, size=(3, 3))
                curves.append(geo.CubicBezier3D(s, s + jitter[0], s + jitter[1], s + jitter[2]))
        if n_dep:
            centers = fps_sample(pts, n_dep, seed + 1)
            for c in centers:
                quadrics.append(_default_quadric(c, diag, bounds))
    else:  # line-segments
        if dataset.segments is None or len(dataset.segments) == 0:
            raise ValueError("line-segments init requires 3D line segments")
        segs = np.asarray(dataset.segments, dtype=np.float64).reshape(-1, 2, 3)
        mids = segs.mean(axis=1)
        if n_ind:
            idx = _fps_indices(mids, min(n_ind, len(segs)), seed)
            for j in range(n_ind):
                a, b = segs[idx[j % len(idx)]]
                ts = np.sort(rng.uniform(0.0, 1.0, 4))
                cp = a[None, :] + ts[:, None] * (b - a)[None, :]
                curves.append(geo.CubicBezier3D(*cp))
        if n_dep:
            idx = _fps_indices(mids, min(n_dep, len(segs)), seed + 1)
            for j in range(n_dep):
                quadrics.append(_default_quadric(mids[idx[j % len(idx)]], diag, bounds))
    return StrokeSet(curves, quadrics)


def _fps_indices(points: np.ndarray, k: int, seed: int) -> list[int]:
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(len(points)))]
    d = np.linalg.norm(points - points[chosen[0]], axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


# ---------------------------------------------------------------------------
# Optimization loop


@dataclass
class OptimizeConfig:
    steps: int = 2000
    stage_split: float = 0.4  # fraction of steps spent on quadrics first
    view_batch: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    contour: ContourConfig = field(default_factory=ContourConfig)
    stroke_width: float | None = None  # px; default scales with resolution
    softness: float = 1.0
    bounds: ParamBounds = field(default_factory=ParamBounds)
    checkpoint_every: int = 0
    on_checkpoint: Callable | None = None  # called with (step, StrokeSet)
    torch_threads: int = 1  # bitwise determinism is guaranteed single-thread

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.stage_split <= 1.0:
            raise ValueError("stage_split must be in [0, 1]")
        if self.view_batch < 1:
            raise ValueError("view_batch must be >= 1")


def make_backend(cfg: LossConfig, sidecar_addr: str | None = None) -> PerceptualBackend:
    if cfg.backend == "pixel-l2":
        return PixelL2Backend()
    if cfg.backend == "distance-transform":
        return DistanceTransformBackend()
    from .sidecar_client import SidecarBackend  # lazy: needs a running service

    host, _, port = (sidecar_addr or "127.0.0.1:7301").rpartition(":")
    return SidecarBackend(host or "127.0.0.1", int(port))


def render_strokes_view(
    strokes: StrokeSet,
    cam: geo.Camera,
    contour_cfg: ContourConfig,
    stroke_width: float | None = None,
    softness: float = 1.0,
) -> tuple[ImageBuffer, ImageBuffer, ImageBuffer]:
    """Render (ind, dep, composite) for one view."""
    width = stroke_width if stroke_width is not None else default_stroke_width(cam.width)
    if strokes.curves:
        s2d = [Stroke2D(geo.project_curve(cam, c), width) for c in strokes.curves]
        ind = rasterize_strokes(s2d, (cam.height, cam.width), width, softness)
    else:
        ind = ImageBuffer.white(cam.height, cam.width)
    dep = (
        render_contour(cam, strokes.quadrics, contour_cfg)
        if strokes.quadrics
        else ImageBuffer.white(cam.height, cam.width)
    )
    return ind, dep, composite(ind, dep)


def _curve_grads_3d(
    strokes: StrokeSet,
    cam: geo.Camera,
    grad_ind: ImageBuffer,
    width: float,
    softness: float,
) -> np.ndarray:
    """Chain raster gradients through the projection to 3D control points."""
    s2d = [Stroke2D(geo.project_curve(cam, c), width) for c in strokes.curves]
    g2d = rasterize_strokes_backward(s2d, grad_ind.shape, grad_ind, width, softness)
    out = np.zeros((strokes.n_ind, 4, 3))
    for i, curve in enumerate(strokes.curves):
        for j, p in enumerate(curve.control_points):
            J = geo.project_point_jacobian(cam, p)
            out[i, j] = g2d[i][j] @ J
    return out


def optimize(
    dataset,
    strokes: StrokeSet,
    cfg: OptimizeConfig,
    backend: PerceptualBackend | None = None,
) -> tuple[StrokeSet, list[tuple[int, str, float]]]:
    """Two-stage optimization; returns final strokes and (step, stage, loss) history."""
    import torch

    torch.set_num_threads(cfg.torch_threads)
    views = dataset.views
    if not views:
        raise ValueError("dataset has no views")
    n_ind, n_dep = strokes.n_ind, strokes.n_dep
    loss_cfg = cfg.loss
    if loss_cfg.apply_robust is None:
        loss_cfg = dataclasses.replace(loss_cfg, apply_robust=n_dep > 0)
    if backend is None:
        backend = make_backend(loss_cfg)

    steps_quadrics = int(round(cfg.steps * cfg.stage_split)) if n_dep > 0 else 0
    if n_ind == 0:
        steps_quadrics = cfg.steps
    rng = np.random.default_rng(cfg.seed)
    state = OptState.init(strokes, STAGE_QUADRICS if steps_quadrics > 0 else STAGE_CURVES)
    history: list[tuple[int, str, float]] = []

    width = cfg.stroke_width
    if width is None:
        width = default_stroke_width(views[0][1].width)

    order: list[int] = []
    frozen_cache: dict[int, ImageBuffer] = {}

    def next_batch() -> list[int]:
        nonlocal order
        batch = []
        while len(batch) < min(cfg.view_batch, len(views)):
            if not order:
                order = list(rng.permutation(len(views)))
            batch.append(order.pop())
        return batch

    current = strokes
    for step in range(cfg.steps):
        stage = STAGE_QUADRICS if step < steps_quadrics else STAGE_CURVES
        if state.stage != stage:
            logger.debug("step %d: entering %s", step, stage)
            state = dataclasses.replace(state, stage=stage)
            frozen_cache.clear()
        batch = next_batch()

        renders = []
        dep_caches = {}
        for vi in batch:
            target, cam = views[vi]
            if stage == STAGE_QUADRICS:
                if vi not in frozen_cache:
                    ind, _, _ = render_strokes_view(current, cam, cfg.contour, width, cfg.softness)
                    frozen_cache[vi] = ind
                ind = frozen_cache[vi]
                if n_dep:
                    dep, dep_caches[vi] = render_contour_cached(cam, current.quadrics, cfg.contour)
                else:
                    dep = ImageBuffer.white(cam.height, cam.width)
            else:
                if vi not in frozen_cache:
                    _, dep, _ = render_strokes_view(current, cam, cfg.contour, width, cfg.softness)
                    frozen_cache[vi] = dep
                dep = frozen_cache[vi]
                if n_ind:
                    s2d = [Stroke2D(geo.project_curve(cam, c), width) for c in current.curves]
                    ind = rasterize_strokes(s2d, (cam.height, cam.width), width, cfg.softness)
                else:
                    ind = ImageBuffer.white(cam.height, cam.width)
            renders.append((vi, target, cam, ind, dep, composite(ind, dep)))

        loss, grad_images = total_loss(
            [(t, comp) for _, t, _, _, _, comp in renders], loss_cfg, backend
        )
        if not np.isfinite(loss):
            raise NumericalAbort(step, f"loss={loss} on views {[r[0] for r in renders]}")

        grad = ParamGradient.zeros(n_ind, n_dep)
        for (vi, target, cam, ind, dep, comp), gimg in zip(renders, grad_images):
            g_ind, g_dep = composite_backward(ind, dep, gimg)
            if stage == STAGE_QUADRICS and n_dep:
                qg = render_contour_backward(
                    cam, current.quadrics, cfg.contour, g_dep, dep_caches.get(vi)
                )
                grad.data[12 * n_ind :] += qg.data
            elif stage == STAGE_CURVES and n_ind:
                cg = _curve_grads_3d(current, cam, g_ind, width, cfg.softness)
                grad.data[: 12 * n_ind] += cg.reshape(-1)

        mask = quadric_mask(n_ind, n_dep) if stage == STAGE_QUADRICS else curve_mask(n_ind, n_dep)
        state = adam_step(
            state, grad, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam, cfg.bounds, mask
        )
        current = unpack_params(state.params, n_ind, n_dep)
        history.append((step, stage, float(loss)))
        if cfg.checkpoint_every and cfg.on_checkpoint and (step + 1) % cfg.checkpoint_every == 0:
            cfg.on_checkpoint(step, current)
    return current, history
