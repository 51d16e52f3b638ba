import json

import numpy as np
import pytest
import torch

from sketch3d import geometry as G
from sketch3d.contour import ContourConfig
from sketch3d.optim import render_strokes_view
from sketch3d.scene import StrokeSet

# bitwise reproducibility of renders across test runs
torch.set_num_threads(1)


def random_camera(rng, distance=4.0, focal=120.0, res=96):
    eye = rng.normal(0, 0.4, 3) + np.array([0.0, 0.0, distance])
    return G.look_at_camera(eye, (0, 0, 0), focal=focal, width=res, height=res, up=(0, 1, 0))


def random_quadric(rng, alpha_range=(0.32, 0.9), eps_range=(0.4, 1.6), spread=0.3):
    return G.Superquadric(
        alpha=rng.uniform(*alpha_range, 3),
        epsilon=rng.uniform(*eps_range, 2),
        rotation=rng.normal(size=4),
        translation=rng.normal(0, spread, 3),
    )


def small_scene(seed=42, n_curves=3):
    rng = np.random.default_rng(seed)
    curves = []
    for _ in range(n_curves):
        c = rng.uniform(-0.7, 0.7, 3)
        curves.append(G.CubicBezier3D(*(c + rng.normal(0, 0.35, (4, 3)))))
    quad = G.Superquadric(
        alpha=(0.5, 0.55, 0.45), epsilon=(0.95, 1.05), rotation=(0.9, 0.1, 0.2, 0.05),
        translation=(0.05, -0.08, 0.02),
    )
    return StrokeSet(curves, [quad])


def turntable_cameras(n, res=96, distance=4.5, focal=None):
    el = np.deg2rad(30.0)
    cams = []
    for k in range(n):
        az = 2 * np.pi * k / n
        eye = distance * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        cams.append(
            G.look_at_camera(eye, (0, 0, 0), focal=focal or 1.5 * res, width=res, height=res)
        )
    return cams


@pytest.fixture(scope="session")
def fixture_dataset(tmp_path_factory):
    """Small on-disk transforms.json dataset rendered from a known scene."""
    from PIL import Image

    root = tmp_path_factory.mktemp("dataset")
    scene = small_scene()
    res = 96
    ccfg = ContourConfig(n_samples=64)
    frames = []
    focal = 1.5 * res
    for k, cam in enumerate(turntable_cameras(6, res=res, focal=focal)):
        _, _, comp = render_strokes_view(scene, cam, ccfg)
        arr = (np.clip(comp.data, 0, 1) * 255).round().astype(np.uint8)
        Image.fromarray(arr, mode="L").save(root / f"r_{k}.png")
        c2w = np.eye(4)
        c2w[:3, :3] = cam.rotation.T @ np.diag([1.0, -1.0, -1.0])
        c2w[:3, 3] = cam.center
        frames.append({"file_path": f"r_{k}.png", "transform_matrix": c2w.tolist()})
    meta = {"camera_angle_x": float(2 * np.arctan(0.5 * res / focal)), "frames": frames}
    (root / "transforms.json").write_text(json.dumps(meta))

    rng = np.random.default_rng(5)
    pts = rng.uniform(-1.0, 1.0, (60, 3))
    ply = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
           "property float x", "property float y", "property float z", "end_header"]
    ply += [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}" for p in pts]
    (root / "points.ply").write_text("\n".join(ply) + "\n")
    segs = rng.uniform(-1.0, 1.0, (12, 6))
    (root / "segments.txt").write_text(
        "\n".join(" ".join(f"{v:.6f}" for v in s) for s in segs) + "\n"
    )
    return root, scene


def decasteljau(cp, t):
    """Independent Bezier evaluation oracle by repeated lerp."""
    pts = [np.asarray(p, dtype=np.float64) for p in cp]
    while len(pts) > 1:
        pts = [(1 - t) * a + t * b for a, b in zip(pts[:-1], pts[1:])]
    return pts[0]
