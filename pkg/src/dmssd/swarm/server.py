"""Model distribution over TCP: a hot-swapping server and a retrying client."""
from __future__ import annotations

import logging
import os
import socket
import socketserver
import threading
import time
from pathlib import Path
from typing import Optional

from ..neural import ModelFormatError, PolicyValueNet, from_bytes
from .protocol import GetModel, ModelAnnouncement, ProtocolError, encode, read_message

log = logging.getLogger(__name__)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        server: ModelServer = self.server.owner  # type: ignore[attr-defined]
        while True:
            try:
                msg = read_message(self.rfile)
            except (EOFError, ConnectionError):
                return
            except ProtocolError as exc:
                log.warning("bad request from %s: %s", self.client_address, exc)
                return
            if not isinstance(msg, GetModel):
                return
            self.wfile.write(server.wire_announcement())
            self.wfile.flush()


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class ModelServer:
    """Serves the current model file; a changed file bumps the version.

    Versions start at 1. The file is re-checked on every request, so a swap
    is visible to the next fetch.
    """

    def __init__(self, model_path, host: str = "127.0.0.1", port: int = 0):
        self.model_path = Path(model_path)
        self._lock = threading.Lock()
        self._stamp = None
        self._corrupt = 0
        self.announcement = self._read(1)
        self._tcp = _TCPServer((host, port), _Handler)
        self._tcp.owner = self
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]

    @property
    def version(self) -> int:
        return self.announcement.version

    def _read(self, version: int) -> ModelAnnouncement:
        data = self.model_path.read_bytes()
        from_bytes(data)  # refuse to serve a broken file
        st = os.stat(self.model_path)
        self._stamp = (st.st_mtime_ns, st.st_size)
        return ModelAnnouncement(version, data)

    def refresh(self) -> int:
        """Pick up a changed model file; returns the current version."""
        with self._lock:
            try:
                st = os.stat(self.model_path)
            except FileNotFoundError:
                return self.announcement.version
            if (st.st_mtime_ns, st.st_size) == self._stamp:
                return self.announcement.version
            try:
                ann = self._read(self.announcement.version + 1)
            except (ModelFormatError, OSError) as exc:
                log.warning("ignoring unreadable model file: %s", exc)
                return self.announcement.version
            if ann.payload != self.announcement.payload:
                self.announcement = ann
                log.info("model swapped to version %d", ann.version)
            return self.announcement.version

    def inject_corruption(self, count: int = 1) -> None:
        """Flip a payload byte in the next ``count`` responses (fault injection)."""
        with self._lock:
            self._corrupt += count

    def wire_announcement(self) -> bytes:
        self.refresh()
        with self._lock:
            data = encode(self.announcement)
            if self._corrupt:
                self._corrupt -= 1
                data = data[:-1] + bytes([data[-1] ^ 0xFF])
        return data

    def start(self) -> "ModelServer":
        self._thread = threading.Thread(target=self._tcp.serve_forever, name="model-server",
                                        daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._tcp.serve_forever()

    def stop(self) -> None:
        self._tcp.shutdown()
        self._tcp.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


class ModelClient:
    """Fetches models; a corrupted transfer is retried and never replaces the
    model already held."""

    def __init__(self, address: tuple[str, int], retries: int = 3, timeout: float = 5.0,
                 backoff: float = 0.05):
        self.address = address
        self.retries = retries
        self.timeout = timeout
        self.backoff = backoff
        self.version = 0
        self.net: Optional[PolicyValueNet] = None
        self.rejected = 0

    def _fetch_once(self) -> ModelAnnouncement:
        with socket.create_connection(self.address, timeout=self.timeout) as sock:
            sock.sendall(encode(GetModel(self.version or None)))
            with sock.makefile("rb") as fh:
                msg = read_message(fh)
        if not isinstance(msg, ModelAnnouncement):
            raise ProtocolError("expected a MODEL reply")
        return msg

    def fetch(self) -> bool:
        """Update to the server's model. True when a new version was loaded."""
        last: Optional[Exception] = None
        for attempt in range(self.retries):
            try:
                ann = self._fetch_once()
                if ann.version == self.version and self.net is not None:
                    return False
                net = from_bytes(ann.payload)
            except (ProtocolError, ModelFormatError, OSError, EOFError) as exc:
                self.rejected += 1
                last = exc
                log.warning("model fetch attempt %d failed: %s", attempt + 1, exc)
                time.sleep(self.backoff * (attempt + 1))
                continue
            self.net, self.version = net, ann.version
            return True
        if self.net is None:
            raise ConnectionError(f"could not fetch a model from {self.address}: {last}")
        return False
