"""SVG 1.1 export of a stroke set seen from one camera.

Curves become cubic `C` path segments of their projected control points.
Superquadric contours have no closed-form perspective silhouette, so they
are exported as polylines traced along the ridge (ink > 0.5) of the
rendered contour image.
"""

from __future__ import annotations

import logging
from pathlib import Path
from xml.etree import ElementTree as ET

import numpy as np
from skimage.morphology import skeletonize

from .contour import ContourConfig, render_contour
from .geometry import Camera, ProjectionError, project_curve
from .scene import StrokeSet

logger = logging.getLogger(__name__)

_NEIGHBORS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _trace_polylines(mask: np.ndarray, min_len: int = 4) -> list[np.ndarray]:
    """Greedy chain extraction over the skeleton's 8-connected pixels."""
    skel = skeletonize(mask)
    pts = {(int(y), int(x)) for y, x in zip(*np.nonzero(skel))}
    adj = {
        p: [q for dy, dx in _NEIGHBORS if (q := (p[0] + dy, p[1] + dx)) in pts] for p in pts
    }
    unvisited = set(pts)
    lines = []
    while unvisited:
        # prefer chain endpoints so open curves come out as single strokes
        start = min(
            unvisited,
            key=lambda p: (sum(q in unvisited for q in adj[p]) != 1, p),
        )
        chain = [start]
        unvisited.discard(start)
        while True:
            nxt = [q for q in adj[chain[-1]] if q in unvisited]
            if not nxt:
                break
            # follow the straightest continuation for smooth polylines
            if len(chain) >= 2:
                d = np.subtract(chain[-1], chain[-2])
                nxt.sort(key=lambda q: -float(np.dot(np.subtract(q, chain[-1]), d)))
            chain.append(nxt[0])
            unvisited.discard(nxt[0])
        if len(chain) >= min_len:
            lines.append(np.array([(x + 0.5, y + 0.5) for y, x in chain]))
    return lines


def export_svg(
    strokes: StrokeSet,
    cam: Camera,
    path: str | Path,
    width_px: float = 3.0,
    contour_cfg: ContourConfig | None = None,
) -> int:
    """Write the SVG; returns the number of emitted elements."""
    svg = ET.Element(
        "svg",
        {
            "xmlns": "http://www.w3.org/2000/svg",
            "version": "1.1",
            "width": str(cam.width),
            "height": str(cam.height),
            "viewBox": f"0 0 {cam.width} {cam.height}",
        },
    )
    g = ET.SubElement(
        svg,
        "g",
        {
            "stroke": "black",
            "fill": "none",
            "stroke-width": f"{width_px:g}",
            "stroke-linecap": "round",
        },
    )
    emitted = 0
    for i, curve in enumerate(strokes.curves):
        try:
            q = project_curve(cam, curve)
        except ProjectionError as e:
            logger.warning("curve %d behind camera (depth %.4g); skipped", i, e.depth)
            continue
        d = (
            f"M {q[0,0]:.3f} {q[0,1]:.3f} "
            f"C {q[1,0]:.3f} {q[1,1]:.3f}, {q[2,0]:.3f} {q[2,1]:.3f}, {q[3,0]:.3f} {q[3,1]:.3f}"
        )
        ET.SubElement(g, "path", {"d": d})
        emitted += 1
    if strokes.quadrics:
        img = render_contour(cam, strokes.quadrics, contour_cfg or ContourConfig())
        for line in _trace_polylines(1.0 - img.data > 0.5):
            pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in line)
            ET.SubElement(g, "polyline", {"points": pts})
            emitted += 1
    ET.ElementTree(svg).write(path, encoding="unicode", xml_declaration=True)
    return emitted
