"""Length-prefixed binary protocol for the perceptual-loss service.

Every frame on the wire is [u32 length][payload], little-endian.

Request payload: type u8 (0 handshake, 1 structural, 2 semantic), then for
loss requests width u32, height u32, target float32 RGB (h*w*3 interleaved,
row-major) and render float32 RGB of the same layout. Handshake requests
carry zero dims and no buffers.

Response payload: status u8 (0 ok, 1 error). Loss responses carry loss
float32 then the gradient float32 (h*w*3) w.r.t. the render. The handshake
response carries version u16 and a u8-counted list of u16-length-prefixed
UTF-8 model ids. Error responses carry a u16-length-prefixed UTF-8 message.
"""

from __future__ import annotations

import socket
import struct

import numpy as np

PROTOCOL_VERSION = 1
MSG_HANDSHAKE = 0
MSG_STRUCTURAL = 1
MSG_SEMANTIC = 2
STATUS_OK = 0
STATUS_ERROR = 1

MODEL_IDS = ("lpips-vgg16", "clip-rn101")
MAX_FRAME = 256 * 1024 * 1024

_HEAD = struct.Struct("<BII")


class ProtocolError(ValueError):
    pass


def read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(struct.pack("<I", len(payload)) + payload)


def recv_frame(sock: socket.socket) -> bytes:
    (length,) = struct.unpack("<I", read_exact(sock, 4))
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    return read_exact(sock, length)


def parse_request(payload: bytes):
    """Returns (msg_type, target, render) with (h, w, 3) float32 arrays,
    or (MSG_HANDSHAKE, None, None)."""
    if len(payload) < 1:
        raise ProtocolError("empty request")
    msg_type = payload[0]
    if msg_type == MSG_HANDSHAKE:
        return MSG_HANDSHAKE, None, None
    if msg_type not in (MSG_STRUCTURAL, MSG_SEMANTIC):
        raise ProtocolError(f"unknown message type {msg_type}")
    if len(payload) < _HEAD.size:
        raise ProtocolError("truncated request header")
    _, w, h = _HEAD.unpack_from(payload)
    if w < 1 or h < 1 or w * h > 16_000_000:
        raise ProtocolError(f"bad image dims {w}x{h}")
    n = w * h * 3 * 4
    if len(payload) != _HEAD.size + 2 * n:
        raise ProtocolError(
            f"payload length {len(payload)} != expected {_HEAD.size + 2 * n} for {w}x{h}"
        )
    target = np.frombuffer(payload, dtype="<f4", count=w * h * 3, offset=_HEAD.size)
    render = np.frombuffer(payload, dtype="<f4", count=w * h * 3, offset=_HEAD.size + n)
    target = target.reshape(h, w, 3)
    render = render.reshape(h, w, 3)
    if not (np.isfinite(target).all() and np.isfinite(render).all()):
        raise ProtocolError("non-finite pixel values")
    if target.min() < -1e-3 or target.max() > 1.001 or render.min() < -1e-3 or render.max() > 1.001:
        raise ProtocolError("pixel values outside [0, 1]")
    return msg_type, target, render


def encode_handshake_response() -> bytes:
    out = bytearray()
    out.append(STATUS_OK)
    out += struct.pack("<H", PROTOCOL_VERSION)
    out.append(len(MODEL_IDS))
    for mid in MODEL_IDS:
        raw = mid.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
    return bytes(out)


def encode_loss_response(loss: float, grad: np.ndarray) -> bytes:
    return (
        bytes([STATUS_OK])
        + struct.pack("<f", loss)
        + np.ascontiguousarray(grad, dtype="<f4").tobytes()
    )


def encode_error(message: str) -> bytes:
    raw = message.encode("utf-8")[:65000]
    return bytes([STATUS_ERROR]) + struct.pack("<H", len(raw)) + raw
