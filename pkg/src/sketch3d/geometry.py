"""Core differentiable math: cubic Bezier curves, pinhole cameras, superquadrics.

Everything here is pure and operates on plain numpy values. Analytic
derivatives are hand-derived closed forms; the batched torch twins used by
the renderers live next to their consumers and are cross-checked against
these in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NEAR_PLANE = 1e-4

# Operating ranges for superquadric shape parameters. The width-compensation
# interpolation formulas start at 0.1, which pins the low end.
ALPHA_MIN, ALPHA_MAX = 0.1, 1.0
EPS_MIN, EPS_MAX = 0.1, 1.9

_BINOM3 = (1.0, 3.0, 3.0, 1.0)


class ProjectionError(ValueError):
    """A point to be projected lies behind the camera near plane."""

    def __init__(self, depth: float):
        super().__init__(f"point behind camera (depth={depth:.6g} <= {NEAR_PLANE:g})")
        self.depth = float(depth)


class DegenerateNormalError(ValueError):
    """Implicit-surface gradient vanishes; no normal direction exists."""


def _vec(x, n: int) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if a.shape != (n,):
        raise ValueError(f"expected {n}-vector, got shape {np.shape(x)}")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite coordinates")
    return a


@dataclass(frozen=True)
class CubicBezier3D:
    """Cubic Bezier curve in world space, four ordered control points."""

    p0: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray

    def __post_init__(self):
        for name in ("p0", "p1", "p2", "p3"):
            object.__setattr__(self, name, _vec(getattr(self, name), 3))

    @property
    def control_points(self) -> np.ndarray:
        """(4, 3) array of control points."""
        return np.stack([self.p0, self.p1, self.p2, self.p3])


@dataclass(frozen=True)
class Superquadric:
    """Superquadric primitive: per-axis scales, two shape exponents, rigid pose.

    ``rotation`` is a unit quaternion (w, x, y, z) mapping canonical to world
    axes; ``translation`` is the world-space center.
    """

    alpha: np.ndarray
    epsilon: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "alpha", _vec(self.alpha, 3))
        object.__setattr__(self, "epsilon", _vec(self.epsilon, 2))
        object.__setattr__(self, "rotation", _vec(self.rotation, 4))
        object.__setattr__(self, "translation", _vec(self.translation, 3))
        if np.any(self.alpha <= 0):
            raise ValueError("alpha components must be strictly positive")
        if np.any(self.epsilon <= 0):
            raise ValueError("epsilon components must be strictly positive")
        norm = float(np.linalg.norm(self.rotation))
        if norm < 1e-8:
            raise ValueError("degenerate quaternion")
        object.__setattr__(self, "rotation", self.rotation / norm)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rot(self.rotation)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``rotation`` maps world to camera coordinates
    (x right, y down, z forward); pixel = focal * (x/z, y/z) + principal_point.
    """

    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    principal_point: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation must have det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", _vec(self.translation, 3))
        object.__setattr__(self, "principal_point", _vec(self.principal_point, 2))
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dims must be >= 1")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, x: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(x, dtype=np.float64) + self.translation

    def ray_directions(self, pixels: np.ndarray) -> np.ndarray:
        """Unit world-space ray directions through continuous pixel coords (N, 2)."""
        px = np.asarray(pixels, dtype=np.float64)
        d = np.stack(
            [
                (px[:, 0] - self.principal_point[0]) / self.focal,
                (px[:, 1] - self.principal_point[1]) / self.focal,
                np.ones(len(px)),
            ],
            axis=1,
        )
        d = d @ self.rotation  # R^T applied to rows
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass(frozen=True)
class RationalBezier2D:
    """2D cubic rational Bezier; weights are control-point depths."""

    q: np.ndarray  # (4, 2)
    w: np.ndarray  # (4,)

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        w = np.asarray(self.w, dtype=np.float64)
        if q.shape != (4, 2) or w.shape != (4,):
            raise ValueError("need four 2D control points and four weights")
        if np.any(w <= 0):
            raise ValueError("weights must be positive (points in front of camera)")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "w", w)


# ---------------------------------------------------------------------------
# Bezier curves


def bernstein(j: int, t: float) -> float:
    """Degree-3 Bernstein basis polynomial b_j(t)."""
    if not 0 <= j <= 3:
        raise ValueError("basis index must be in 0..3")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return _BINOM3[j] * t**j * (1.0 - t) ** (3 - j)


def bezier_eval(curve: CubicBezier3D, t: float) -> np.ndarray:
    """Point on the curve at parameter t."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    b = np.array([bernstein(j, t) for j in range(4)])
    return b @ curve.control_points


# ---------------------------------------------------------------------------
# Projection


def project_point(cam: Camera, x: np.ndarray) -> tuple[np.ndarray, float]:
    """Perspective-project a world point; returns (pixel, camera-frame depth)."""
    xc = cam.to_camera(x)
    z = float(xc[2])
    if z <= NEAR_PLANE:
        raise ProjectionError(z)
    pixel = cam.focal * xc[:2] / z + cam.principal_point
    return pixel, z


def project_point_jacobian(cam: Camera, x: np.ndarray) -> np.ndarray:
    """(2, 3) Jacobian of the pixel coordinates w.r.t. the world point."""
    xc = cam.to_camera(x)
    z = float(xc[2])
    if z <= NEAR_PLANE:
        raise ProjectionError(z)
    f = cam.focal
    J_cam = np.array([[f / z, 0.0, -f * xc[0] / z**2], [0.0, f / z, -f * xc[1] / z**2]])
    return J_cam @ cam.rotation


def project_curve(cam: Camera, curve: CubicBezier3D) -> np.ndarray:
    """Project a 3D curve to a 2D cubic Bezier: the (4, 2) array of projected
    control points. Exact under orthographic viewing, approximate under
    perspective (the approximation improves with camera distance).
    """
    return np.stack([project_point(cam, p)[0] for p in curve.control_points])


def rational_project_curve(cam: Camera, curve: CubicBezier3D) -> RationalBezier2D:
    """Exact perspective image of a 3D cubic Bezier: rational curve whose
    weights are the control-point depths."""
    qs, ws = [], []
    for p in curve.control_points:
        pixel, depth = project_point(cam, p)
        qs.append(pixel)
        ws.append(depth)
    return RationalBezier2D(np.stack(qs), np.array(ws))


def rational_bezier_eval(rb: RationalBezier2D, t: float) -> np.ndarray:
    """Evaluate a rational Bezier: sum b_j w_j q_j / sum b_j w_j."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    b = np.array([bernstein(j, t) for j in range(4)])
    denom = float(b @ rb.w)
    if denom <= 0:
        raise ArithmeticError("rational Bezier denominator vanished")
    return (b * rb.w) @ rb.q / denom


# ---------------------------------------------------------------------------
# Quaternions


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a quaternion (w, x, y, z).

    Uses the scale-invariant (homogeneous) form, so the map is well defined
    and differentiable on the ambient 4-vector away from zero.
    """
    w, x, y, z = np.asarray(q, dtype=np.float64)
    n = w * w + x * x + y * y + z * z
    return (
        np.array(
            [
                [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
            ]
        )
        / n
    )


def quat_rot_jacobian(q: np.ndarray) -> np.ndarray:
    """(4, 3, 3) array of dR/dq_i for the scale-invariant rotation map."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    n = w * w + x * x + y * y + z * z
    R = quat_to_rot(q)
    dM = np.array(
        [
            [[2 * w, -2 * z, 2 * y], [2 * z, 2 * w, -2 * x], [-2 * y, 2 * x, 2 * w]],
            [[2 * x, 2 * y, 2 * z], [2 * y, -2 * x, -2 * w], [2 * z, 2 * w, -2 * x]],
            [[-2 * y, 2 * x, 2 * w], [2 * x, 2 * y, 2 * z], [-2 * w, 2 * z, -2 * y]],
            [[-2 * z, -2 * w, 2 * x], [2 * w, -2 * z, 2 * y], [2 * x, 2 * y, 2 * z]],
        ]
    )
    qv = np.array([w, x, y, z])
    return dM / n - R[None, :, :] * (2.0 * qv / n)[:, None, None]


# ---------------------------------------------------------------------------
# Superquadric implicit surface


def _canonical(sq: Superquadric, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    R = sq.rotation_matrix
    v = np.asarray(x, dtype=np.float64) - sq.translation
    return R, v, R.T @ v


def _implicit_terms(sq: Superquadric, xh: np.ndarray):
    """Shared pieces of the implicit function in canonical coordinates."""
    e1, e2 = sq.epsilon
    u = np.abs(xh) / sq.alpha
    gx = u[0] ** (2.0 / e2)
    gy = u[1] ** (2.0 / e2)
    gz = u[2] ** (2.0 / e1)
    h = gx + gy
    return u, gx, gy, gz, h


def sq_implicit(sq: Superquadric, x: np.ndarray) -> float:
    """Implicit surface value S(x): 1 on the surface, >1 outside, <1 inside.

    Base terms are taken in absolute value so S is defined in all octants.
    """
    _, _, xh = _canonical(sq, x)
    e1, e2 = sq.epsilon
    _, gx, gy, gz, h = _implicit_terms(sq, xh)
    return float(h ** (e2 / e1) + gz)


def sq_union(sqs: list[Superquadric], x: np.ndarray) -> tuple[float, int]:
    """Union of superquadrics: min over primitives, first index wins ties."""
    if not sqs:
        raise ValueError("sq_union needs at least one superquadric")
    values = [sq_implicit(sq, x) for sq in sqs]
    idx = int(np.argmin(values))
    return values[idx], idx


def _canonical_gradient(sq: Superquadric, xh: np.ndarray) -> np.ndarray:
    """Gradient of the implicit function w.r.t. canonical coordinates."""
    a = sq.alpha
    e1, e2 = sq.epsilon
    u, gx, gy, gz, h = _implicit_terms(sq, xh)
    e = e2 / e1

    def pow_term(ui, ei, ai, xi):
        if ui == 0.0:
            return 0.0
        return (2.0 / ei) * ui ** (2.0 / ei - 1.0) * math.copysign(1.0, xi) / ai

    dgx = pow_term(u[0], e2, a[0], xh[0])
    dgy = pow_term(u[1], e2, a[1], xh[1])
    dgz = pow_term(u[2], e1, a[2], xh[2])
    df_dh = e * h ** (e - 1.0) if h > 0.0 else 0.0
    return np.array([df_dh * dgx, df_dh * dgy, dgz])


def sq_gradient(sq: Superquadric, x: np.ndarray) -> np.ndarray:
    """World-frame gradient of S at x (unnormalized)."""
    R, _, xh = _canonical(sq, x)
    return R @ _canonical_gradient(sq, xh)


def sq_normal(sqs: list[Superquadric], x: np.ndarray) -> np.ndarray:
    """Unit surface normal of the union: gradient of the winning primitive."""
    _, idx = sq_union(sqs, x)
    g = sq_gradient(sqs[idx], x)
    norm = float(np.linalg.norm(g))
    if norm <= 1e-12:
        raise DegenerateNormalError(f"vanishing implicit gradient at {np.asarray(x)}")
    return g / norm


def sq_param_grads(sq: Superquadric, x: np.ndarray) -> dict[str, np.ndarray]:
    """Analytic derivatives of S(x) w.r.t. position and all 12 parameters.

    Returns keys ``x`` (3,), ``alpha`` (3,), ``epsilon`` (2,), ``rotation``
    (4, ambient quaternion), ``translation`` (3,).
    """
    R, v, xh = _canonical(sq, x)
    a = sq.alpha
    e1, e2 = sq.epsilon
    u, gx, gy, gz, h = _implicit_terms(sq, xh)
    e = e2 / e1
    df_dh = e * h ** (e - 1.0) if h > 0.0 else 0.0

    grad_canon = _canonical_gradient(sq, xh)
    grad_world = R @ grad_canon

    d_alpha = np.array(
        [
            df_dh * (-(2.0 / e2) * gx / a[0]),
            df_dh * (-(2.0 / e2) * gy / a[1]),
            -(2.0 / e1) * gz / a[2],
        ]
    )

    # g = u^(2/eps) => dg/deps = g * ln(u) * (-2/eps^2); u == 0 limits to 0.
    def g_log(gi, ui):
        return gi * math.log(ui) if ui > 0.0 else 0.0

    dgx_de2 = g_log(gx, u[0]) * (-2.0 / e2**2)
    dgy_de2 = g_log(gy, u[1]) * (-2.0 / e2**2)
    dgz_de1 = g_log(gz, u[2]) * (-2.0 / e1**2)
    h_pow_log = h**e * math.log(h) if h > 0.0 else 0.0
    d_e1 = h_pow_log * (-e2 / e1**2) + dgz_de1
    d_e2 = h_pow_log / e1 + df_dh * (dgx_de2 + dgy_de2)

    dR = quat_rot_jacobian(sq.rotation)
    d_quat = np.array([grad_canon @ (dR[i].T @ v) for i in range(4)])

    return {
        "x": grad_world,
        "alpha": d_alpha,
        "epsilon": np.array([d_e1, d_e2]),
        "rotation": d_quat,
        "translation": -grad_world,
    }


def look_at_camera(
    eye: np.ndarray,
    target: np.ndarray,
    focal: float,
    width: int,
    height: int,
    up: np.ndarray = (0.0, 0.0, 1.0),
) -> Camera:
    """Camera at ``eye`` looking toward ``target`` (z-up world)."""
    eye = _vec(eye, 3)
    target = _vec(target, 3)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = _vec(up, 3)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight along up; pick another basis
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    t = -R @ eye
    pp = np.array([width / 2.0, height / 2.0])
    return Camera(R, t, focal, pp, width, height)
