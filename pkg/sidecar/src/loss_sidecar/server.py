"""TCP service loop: one connection at a time, one in-flight request."""

from __future__ import annotations

import logging
import socket

from . import protocol as proto
from .models import LossModels

logger = logging.getLogger(__name__)


def handle_request(payload: bytes, models: LossModels) -> bytes:
    msg_type, target, render = proto.parse_request(payload)
    if msg_type == proto.MSG_HANDSHAKE:
        return proto.encode_handshake_response()
    fn = models.structural if msg_type == proto.MSG_STRUCTURAL else models.semantic
    loss, grad = fn(target, render)
    if not (loss == loss and abs(loss) != float("inf")):
        return proto.encode_error("model produced a non-finite loss")
    return proto.encode_loss_response(loss, grad)


def serve_connection(conn: socket.socket, models: LossModels) -> None:
    """Serve frames until the peer disconnects or sends a malformed frame."""
    with conn:
        while True:
            try:
                payload = proto.recv_frame(conn)
            except (ConnectionError, OSError):
                return
            except proto.ProtocolError as e:
                try:
                    proto.send_frame(conn, proto.encode_error(str(e)))
                except OSError:
                    pass
                return  # reset the connection on malformed framing
            try:
                response = handle_request(payload, models)
            except proto.ProtocolError as e:
                try:
                    proto.send_frame(conn, proto.encode_error(str(e)))
                except OSError:
                    pass
                return
            except Exception as e:  # noqa: BLE001 - report, keep serving
                logger.exception("request failed")
                response = proto.encode_error(f"{type(e).__name__}: {e}")
            try:
                proto.send_frame(conn, response)
            except OSError:
                return


def serve(host: str = "127.0.0.1", port: int = 7301, models: LossModels | None = None,
          ready_callback=None) -> None:
    """Bind and serve until the process is killed."""
    if models is None:
        models = LossModels()
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as srv:
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, port))
        srv.listen(1)
        actual_port = srv.getsockname()[1]
        logger.info("serving lpips-vgg16 / clip-rn101 on %s:%d (calibrated=%s)",
                    host, actual_port, models.calibrated)
        if ready_callback is not None:
            ready_callback(actual_port)
        while True:
            conn, addr = srv.accept()
            logger.info("connection from %s:%d", *addr)
            serve_connection(conn, models)
