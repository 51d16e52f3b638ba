import socket
import threading

import pytest

from loss_sidecar.models import LossModels
from loss_sidecar.server import serve_connection


@pytest.fixture(scope="session")
def models():
    return LossModels()


@pytest.fixture(scope="session")
def server(models):
    """In-process server on an ephemeral port; accepts one client at a time."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind(("127.0.0.1", 0))
    srv.listen(8)
    port = srv.getsockname()[1]
    stop = threading.Event()

    def loop():
        srv.settimeout(0.2)
        while not stop.is_set():
            try:
                conn, _ = srv.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            serve_connection(conn, models)

    thread = threading.Thread(target=loop, daemon=True)
    thread.start()
    yield "127.0.0.1", port
    stop.set()
    srv.close()
    thread.join(timeout=2)


def connect(addr):
    return socket.create_connection(addr, timeout=60)
