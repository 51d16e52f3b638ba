"""Dataset ingestion: posed multi-view images, sparse points, line segments.

The transforms.json convention: ``camera_angle_x`` plus per-frame
camera-to-world matrices for a camera looking down its own -z with +y up
(OpenGL-style). Loaded cameras are converted to the pinhole convention used
everywhere else (x right, y down, z forward).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera
from .raster2d import ImageBuffer

_GL_TO_CV = np.diag([1.0, -1.0, -1.0])


@dataclass
class Dataset:
    views: list[tuple[ImageBuffer, Camera]]  # grayscale target + camera
    rgb: list[np.ndarray]  # (H, W, 3) float targets, aligned with views
    points: np.ndarray | None
    segments: np.ndarray | None  # (N, 2, 3) endpoint pairs
    bbox: tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        if not self.views:
            raise ValueError("dataset needs at least one view")
        h, w = self.views[0][0].shape
        for img, cam in self.views:
            if img.shape != (h, w) or (cam.height, cam.width) != (h, w):
                raise ValueError("all views must share one resolution")
        lo, hi = self.bbox
        if not np.all(np.asarray(hi) > np.asarray(lo)):
            raise ValueError("degenerate bbox")


def _decode_image(path: Path) -> np.ndarray:
    """PNG to float RGB in [0,1]; RGBA is composited over white."""
    with Image.open(path) as im:
        arr = np.asarray(im).astype(np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.shape[2] == 4:
        a = arr[:, :, 3:4]
        arr = arr[:, :, :3] * a + (1.0 - a)
    return arr[:, :, :3]


def to_gray(rgb: np.ndarray) -> ImageBuffer:
    return ImageBuffer(rgb @ np.array([0.299, 0.587, 0.114]))


def camera_from_transform(
    transform: np.ndarray, width: int, height: int, focal: float
) -> Camera:
    """World-to-camera pinhole from a NeRF-style camera-to-world matrix."""
    c2w = np.asarray(transform, dtype=np.float64)
    if c2w.shape != (4, 4):
        raise ValueError("transform_matrix must be 4x4")
    R_c2w = c2w[:3, :3]
    if abs(np.linalg.det(R_c2w)) < 1e-9:
        raise ValueError("transform_matrix is singular")
    R = _GL_TO_CV @ R_c2w.T
    t = -R @ c2w[:3, 3]
    pp = np.array([width / 2.0, height / 2.0])
    return Camera(R, t, focal, pp, width, height)


def load_dataset(
    root: str | Path,
    points_path: str | Path | None = None,
    segments_path: str | Path | None = None,
    bbox_margin: float = 0.05,
) -> Dataset:
    """Load a transforms.json dataset rooted at ``root``.

    The bbox derives from the point cloud when present, else from segment
    endpoints, else from the camera look-at region (unit box fallback).
    """
    root = Path(root)
    meta_path = root / "transforms.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing {meta_path}")
    meta = json.loads(meta_path.read_text())
    angle_x = float(meta["camera_angle_x"])

    views = []
    rgbs = []
    for frame in meta["frames"]:
        img_path = root / frame["file_path"]
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        if not img_path.exists():
            raise FileNotFoundError(f"frame image not found: {img_path}")
        rgb = _decode_image(img_path)
        h, w = rgb.shape[:2]
        focal = 0.5 * w / np.tan(0.5 * angle_x)
        cam = camera_from_transform(np.array(frame["transform_matrix"]), w, h, focal)
        views.append((to_gray(rgb), cam))
        rgbs.append(rgb)

    points = load_points(points_path) if points_path else None
    segments = load_segments(segments_path) if segments_path else None

    if points is not None and len(points):
        lo, hi = points.min(axis=0), points.max(axis=0)
    elif segments is not None and len(segments):
        flat = segments.reshape(-1, 3)
        lo, hi = flat.min(axis=0), flat.max(axis=0)
    else:
        lo, hi = np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0])
    span = np.maximum(hi - lo, 1e-6)
    lo = lo - bbox_margin * span
    hi = hi + bbox_margin * span
    return Dataset(views, rgbs, points, segments, (lo, hi))


# ---------------------------------------------------------------------------
# PLY point clouds


def load_points(path: str | Path) -> np.ndarray:
    """Parse x,y,z vertex properties from an ASCII or binary-LE PLY file."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    end = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    n_vertex = 0
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in header:
        tok = line.strip().split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise ValueError("list properties in vertex element are unsupported")
            props.append((tok[2], tok[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"unsupported PLY format {fmt!r}")
    names = [p[0] for p in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ValueError("PLY is missing x/y/z vertex properties")
    if n_vertex == 0:
        return np.zeros((0, 3))

    if fmt == "ascii":
        body = raw[end:].decode("ascii").split()
        per = len(props)
        if len(body) < n_vertex * per:
            raise ValueError("truncated PLY payload")
        vals = np.array(body[: n_vertex * per], dtype=np.float64).reshape(n_vertex, per)
        return vals[:, [names.index(a) for a in ("x", "y", "z")]]

    sizes = {"char": "b", "uchar": "B", "int8": "b", "uint8": "B",
             "short": "h", "ushort": "H", "int16": "h", "uint16": "H",
             "int": "i", "uint": "I", "int32": "i", "uint32": "I",
             "float": "f", "float32": "f", "double": "d", "float64": "d"}
    try:
        codes = "".join(sizes[t] for _, t in props)
    except KeyError as e:
        raise ValueError(f"unsupported PLY property type {e}") from None
    rec = struct.Struct("<" + codes)
    payload = raw[end:]
    if len(payload) < rec.size * n_vertex:
        raise ValueError("truncated PLY payload")
    out = np.empty((n_vertex, 3))
    ix, iy, iz = (names.index(a) for a in ("x", "y", "z"))
    for i in range(n_vertex):
        row = rec.unpack_from(payload, i * rec.size)
        out[i] = (row[ix], row[iy], row[iz])
    return out


def load_segments(path: str | Path) -> np.ndarray:
    """Plain-text 3D segments: six floats per line (two endpoints)."""
    segs = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 6:
            raise ValueError(f"{path}:{ln}: expected six floats per segment")
        segs.append([vals[:3], vals[3:]])
    return np.array(segs, dtype=np.float64).reshape(-1, 2, 3)
