"""Secondary acceptance: protocol handshake, self-similarity, gradient spot
check, fuzz robustness, and end-to-end optimization through the service."""

import json
import struct
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import connect
from loss_sidecar import protocol as proto


def report(name, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def test_handshake_model_ids(server):
    with connect(server) as sock:
        proto.send_frame(sock, bytes([proto.MSG_HANDSHAKE]))
        resp = proto.recv_frame(sock)
    (version,) = struct.unpack_from("<H", resp, 1)
    ids = []
    off = 4
    for _ in range(resp[3]):
        (ln,) = struct.unpack_from("<H", resp, off)
        ids.append(resp[off + 2 : off + 2 + ln].decode())
        off += 2 + ln
    report("sidecar/handshake", version == 1 and ids == ["lpips-vgg16", "clip-rn101"],
           f"version {version}, ids {ids}")


def _loss_over_wire(server, msg_type, target, render):
    h, w = target.shape[:2]
    payload = (
        struct.pack("<BII", msg_type, w, h)
        + target.astype("<f4").tobytes()
        + render.astype("<f4").tobytes()
    )
    with connect(server) as sock:
        proto.send_frame(sock, payload)
        resp = proto.recv_frame(sock)
    assert resp[0] == proto.STATUS_OK, resp
    (loss,) = struct.unpack_from("<f", resp, 1)
    grad = np.frombuffer(resp[5:], dtype="<f4").reshape(h, w, 3)
    return loss, grad


def test_self_similarity(server):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (48, 48, 3)).astype(np.float32)
    s, _ = _loss_over_wire(server, proto.MSG_STRUCTURAL, img, img)
    m, _ = _loss_over_wire(server, proto.MSG_SEMANTIC, img, img)
    report("sidecar/self-similarity", abs(s) < 1e-5 and abs(m) < 1e-5,
           f"structural(I,I) {s:.2e}, semantic(I,I) {m:.2e}")


def test_gradient_spot_check(server, models):
    from scipy import ndimage

    rng = np.random.default_rng(3)
    a = ndimage.gaussian_filter(rng.uniform(0, 1, (48, 48, 3)), sigma=(5, 5, 0))
    target = ((a - a.min()) / (a.max() - a.min())).astype(np.float32)
    render = np.clip(target + rng.normal(0, 0.2, target.shape), 0, 1).astype(np.float32)
    loss, grad = _loss_over_wire(server, proto.MSG_STRUCTURAL, target, render)
    flat = np.argsort(np.abs(grad).ravel())[::-1][:10]
    h = 1e-2
    worst = 0.0
    for idx in flat:
        i, j, c = np.unravel_index(idx, grad.shape)
        up = render.copy()
        up[i, j, c] = np.clip(up[i, j, c] + h, 0, 1)
        dn = render.copy()
        dn[i, j, c] = np.clip(dn[i, j, c] - h, 0, 1)
        lu, _ = _loss_over_wire(server, proto.MSG_STRUCTURAL, target, up)
        ld, _ = _loss_over_wire(server, proto.MSG_STRUCTURAL, target, dn)
        act = (lu - ld) / (up[i, j, c] - dn[i, j, c])
        worst = max(worst, abs(act - grad[i, j, c]) / max(abs(act), abs(grad[i, j, c])))
    report("sidecar/gradient-spot-check", worst < 0.2, f"worst rel {worst:.3f} over 10 px")


def test_protocol_fuzz(server):
    rng = np.random.default_rng(99)
    survived = 0
    for _ in range(1000):
        with connect(server) as sock:
            n = int(rng.integers(0, 128))
            try:
                proto.send_frame(sock, rng.bytes(n))
                resp = proto.recv_frame(sock)
                assert resp[0] in (proto.STATUS_OK, proto.STATUS_ERROR)
            except (ConnectionError, OSError):
                pass
            survived += 1
    with connect(server) as sock:
        proto.send_frame(sock, bytes([proto.MSG_HANDSHAKE]))
        ok = proto.recv_frame(sock)[0] == proto.STATUS_OK
    report("sidecar/protocol-fuzz", survived == 1000 and ok,
           f"{survived} random frames, server healthy {ok}")


@pytest.fixture(scope="module")
def e2e_fixture(tmp_path_factory):
    """Small rendered dataset on disk for the end-to-end CLI run."""
    import torch

    torch.set_num_threads(1)
    from PIL import Image

    from sketch3d import geometry as G
    from sketch3d.contour import ContourConfig
    from sketch3d.optim import render_strokes_view
    from sketch3d.scene import StrokeSet

    root = tmp_path_factory.mktemp("e2e")
    rng = np.random.default_rng(6)
    curves = []
    for _ in range(3):
        c = rng.uniform(-0.7, 0.7, 3)
        curves.append(G.CubicBezier3D(*(c + rng.normal(0, 0.35, (4, 3)))))
    scene = StrokeSet(curves, [G.Superquadric(alpha=(0.5, 0.55, 0.45), epsilon=(1.0, 1.0))])
    res = 96
    focal = 1.5 * res
    frames = []
    ccfg = ContourConfig(n_samples=48)
    for k in range(4):
        az = 2 * np.pi * k / 4
        el = np.deg2rad(30)
        eye = 4.5 * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        cam = G.look_at_camera(eye, (0, 0, 0), focal=focal, width=res, height=res)
        _, _, comp = render_strokes_view(scene, cam, ccfg)
        Image.fromarray((np.clip(comp.data, 0, 1) * 255).round().astype(np.uint8),
                        mode="L").save(root / f"r_{k}.png")
        c2w = np.eye(4)
        c2w[:3, :3] = cam.rotation.T @ np.diag([1.0, -1.0, -1.0])
        c2w[:3, 3] = cam.center
        frames.append({"file_path": f"r_{k}.png", "transform_matrix": c2w.tolist()})
    (root / "transforms.json").write_text(
        json.dumps({"camera_angle_x": float(2 * np.arctan(0.5 * res / focal)),
                    "frames": frames})
    )
    from sketch3d.scene import pack_params, unpack_params
    from sketch3d.strokefile import save_strokes

    prng = np.random.default_rng(8)
    start = unpack_params(pack_params(scene) + prng.normal(0, 0.08, scene.n_params), 3, 1)
    save_strokes(start, root / "init.3dl")
    return root


def test_end_to_end_optimize(server, e2e_fixture, tmp_path):
    host, port = server
    out = tmp_path / "out.3dl"
    log = tmp_path / "loss.csv"
    # full-batch steps, a structural-dominated loss (the uncalibrated
    # semantic term is a noisy plateau), and a gentle learning rate give
    # clean monotone descent
    cmd = [
        sys.executable, "-m", "sketch3d.cli", "optimize",
        "--dataset", str(e2e_fixture),
        "--init-file", str(e2e_fixture / "init.3dl"), "--seed", "5",
        "--loss", "sidecar", "--sidecar-addr", f"{host}:{port}",
        "--steps", "50", "--view-batch", "4", "--n-samples", "48",
        "--stage-split", "0.4", "--lr", "5e-4", "--lambda", "10",
        "--out", str(out), "--loss-log", str(log),
    ]
    t0 = time.time()
    result = subprocess.run(cmd, capture_output=True, text=True, timeout=1800)
    assert result.returncode == 0, result.stderr[-2000:]
    losses = [float(line.split(",")[2]) for line in log.read_text().splitlines()]
    first10 = losses[:10]
    strictly_decreasing = all(b < a for a, b in zip(first10[:-1], first10[1:]))
    report(
        "sidecar/end-to-end",
        out.exists() and len(losses) == 50 and strictly_decreasing,
        f"50 steps in {time.time() - t0:.0f}s, first 10 losses "
        f"{[f'{v:.4f}' for v in first10]}, strictly decreasing {strictly_decreasing}",
    )
