"""Client for the perceptual-loss sidecar service.

Wire protocol (TCP, little-endian): every frame is [u32 length][payload].
Request payload: type u8 (0 handshake, 1 structural, 2 semantic),
width u32, height u32, target float32 RGB (h*w*3, row-major, interleaved),
render float32 RGB (same layout). Handshake sends zero dims and no buffers.

Response payload: status u8. For losses: loss float32 then gradient
float32 (h*w*3) w.r.t. the render. For handshake: version u16 then a u8
count of model-id strings, each u16-length-prefixed UTF-8. Errors carry a
u16-length-prefixed UTF-8 message.
"""

from __future__ import annotations

import socket
import struct

import numpy as np

from .losses import PerceptualBackend
from .raster2d import ImageBuffer

PROTOCOL_VERSION = 1
MSG_HANDSHAKE = 0
MSG_STRUCTURAL = 1
MSG_SEMANTIC = 2
STATUS_OK = 0
STATUS_ERROR = 1


class SidecarError(RuntimeError):
    pass


def read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise SidecarError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(struct.pack("<I", len(payload)) + payload)


def recv_frame(sock: socket.socket) -> bytes:
    (length,) = struct.unpack("<I", read_exact(sock, 4))
    return read_exact(sock, length)


def encode_request(msg_type: int, target: np.ndarray | None, render: np.ndarray | None) -> bytes:
    if msg_type == MSG_HANDSHAKE:
        return struct.pack("<BII", MSG_HANDSHAKE, 0, 0)
    h, w = target.shape[:2]
    head = struct.pack("<BII", msg_type, w, h)
    return (
        head
        + np.ascontiguousarray(target, dtype="<f4").tobytes()
        + np.ascontiguousarray(render, dtype="<f4").tobytes()
    )


class SidecarBackend(PerceptualBackend):
    """PerceptualBackend speaking the sidecar protocol.

    Gray renders are replicated to RGB; a gray target is replaced by its
    original RGB image when one was registered in ``rgb_targets`` (keyed by
    id of the gray buffer's array). Returned gradients are summed over
    channels, matching the replication.
    """

    max_concurrency = 1

    def __init__(self, host: str = "127.0.0.1", port: int = 7301, timeout: float = 120.0):
        self.host = host
        self.port = port
        self.timeout = timeout
        self.rgb_targets: dict[int, np.ndarray] = {}
        self._sock: socket.socket | None = None

    def _connect(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        return self._sock

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def _roundtrip(self, payload: bytes) -> bytes:
        try:
            sock = self._connect()
            send_frame(sock, payload)
            return recv_frame(sock)
        except (OSError, SidecarError):
            self.close()
            raise

    def handshake(self) -> tuple[int, list[str]]:
        resp = self._roundtrip(encode_request(MSG_HANDSHAKE, None, None))
        status = resp[0]
        if status != STATUS_OK:
            raise SidecarError(_decode_error(resp))
        (version,) = struct.unpack_from("<H", resp, 1)
        (count,) = struct.unpack_from("<B", resp, 3)
        ids = []
        off = 4
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", resp, off)
            ids.append(resp[off + 2 : off + 2 + ln].decode("utf-8"))
            off += 2 + ln
        return version, ids

    def _to_rgb(self, img: ImageBuffer, is_target: bool) -> np.ndarray:
        if is_target:
            rgb = self.rgb_targets.get(id(img.data))
            if rgb is not None:
                return rgb
        return np.repeat(img.data[:, :, None], 3, axis=2)

    def _loss(self, msg_type: int, target: ImageBuffer, render: ImageBuffer):
        t_rgb = self._to_rgb(target, True)
        r_rgb = self._to_rgb(render, False)
        h, w = render.shape
        resp = self._roundtrip(encode_request(msg_type, t_rgb, r_rgb))
        if resp[0] != STATUS_OK:
            raise SidecarError(_decode_error(resp))
        (loss,) = struct.unpack_from("<f", resp, 1)
        grad = np.frombuffer(resp[5:], dtype="<f4").astype(np.float64).reshape(h, w, 3)
        return float(loss), ImageBuffer(grad.sum(axis=2))

    def structural(self, target, render):
        return self._loss(MSG_STRUCTURAL, target, render)

    def semantic(self, target, render):
        return self._loss(MSG_SEMANTIC, target, render)


def _decode_error(resp: bytes) -> str:
    try:
        (ln,) = struct.unpack_from("<H", resp, 1)
        return resp[3 : 3 + ln].decode("utf-8", errors="replace")
    except struct.error:
        return "malformed error response"
