"""Optimizable scene: stroke set plus flat parameter/gradient layout.

Layout, in order: 12 numbers per curve (p0..p3, xyz each), then 12 per
superquadric (alpha 3, epsilon 2, quaternion 4 wxyz, translation 3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CubicBezier3D, Superquadric

PARAMS_PER_CURVE = 12
PARAMS_PER_QUADRIC = 12


@dataclass
class StrokeSet:
    """The full optimizable scene; primitive counts are fixed for a run."""

    curves: list[CubicBezier3D]
    quadrics: list[Superquadric]

    def __post_init__(self):
        if len(self.curves) + len(self.quadrics) < 1:
            raise ValueError("StrokeSet needs at least one primitive")

    @property
    def n_ind(self) -> int:
        return len(self.curves)

    @property
    def n_dep(self) -> int:
        return len(self.quadrics)

    @property
    def n_params(self) -> int:
        return PARAMS_PER_CURVE * self.n_ind + PARAMS_PER_QUADRIC * self.n_dep


def pack_params(strokes: StrokeSet) -> np.ndarray:
    """Flatten all parameters into one float64 vector."""
    parts = [c.control_points.reshape(-1) for c in strokes.curves]
    parts += [
        np.concatenate([q.alpha, q.epsilon, q.rotation, q.translation])
        for q in strokes.quadrics
    ]
    return np.concatenate(parts) if parts else np.zeros(0)


def unpack_params(vec: np.ndarray, n_ind: int, n_dep: int) -> StrokeSet:
    """Rebuild a StrokeSet from a flat parameter vector."""
    vec = np.asarray(vec, dtype=np.float64)
    expected = PARAMS_PER_CURVE * n_ind + PARAMS_PER_QUADRIC * n_dep
    if vec.shape != (expected,):
        raise ValueError(f"expected {expected} parameters, got {vec.shape}")
    curves = []
    for i in range(n_ind):
        cp = vec[12 * i : 12 * (i + 1)].reshape(4, 3)
        curves.append(CubicBezier3D(*cp))
    quadrics = []
    base = 12 * n_ind
    for i in range(n_dep):
        p = vec[base + 12 * i : base + 12 * (i + 1)]
        quadrics.append(
            Superquadric(alpha=p[0:3], epsilon=p[3:5], rotation=p[5:9], translation=p[9:12])
        )
    return StrokeSet(curves, quadrics)


@dataclass
class ParamGradient:
    """Flat gradient record mirroring the StrokeSet parameter layout."""

    data: np.ndarray
    n_ind: int
    n_dep: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        expected = PARAMS_PER_CURVE * self.n_ind + PARAMS_PER_QUADRIC * self.n_dep
        if self.data.shape != (expected,):
            raise ValueError("gradient length does not match layout")

    @classmethod
    def zeros(cls, n_ind: int, n_dep: int) -> "ParamGradient":
        return cls(np.zeros(12 * n_ind + 12 * n_dep), n_ind, n_dep)

    def curve_grad(self, i: int) -> np.ndarray:
        """(4, 3) view of curve i's control-point gradient."""
        return self.data[12 * i : 12 * (i + 1)].reshape(4, 3)

    def quadric_grad(self, i: int) -> dict[str, np.ndarray]:
        """Views into quadric i's gradient components."""
        o = 12 * self.n_ind + 12 * i
        return {
            "alpha": self.data[o : o + 3],
            "epsilon": self.data[o + 3 : o + 5],
            "rotation": self.data[o + 5 : o + 9],
            "translation": self.data[o + 9 : o + 12],
        }

    def __add__(self, other: "ParamGradient") -> "ParamGradient":
        if (self.n_ind, self.n_dep) != (other.n_ind, other.n_dep):
            raise ValueError("gradient layouts differ")
        return ParamGradient(self.data + other.data, self.n_ind, self.n_dep)


def scene_bounds(strokes: StrokeSet) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned world bounds covering curves and quadric extents."""
    los, his = [], []
    for c in strokes.curves:
        cp = c.control_points
        los.append(cp.min(axis=0))
        his.append(cp.max(axis=0))
    for q in strokes.quadrics:
        r = float(np.linalg.norm(q.alpha))
        los.append(q.translation - r)
        his.append(q.translation + r)
    return np.min(los, axis=0), np.max(his, axis=0)
