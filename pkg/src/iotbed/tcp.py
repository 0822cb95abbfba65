"""Newline-delimited UTF-8 framing over TCP for external devices.

Each link runs one reader thread that pushes complete frames onto a
queue; the sim loop ingests them through ``Scheduler.submit`` so device
logic never runs off the loop thread.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
from typing import Callable

log = logging.getLogger(__name__)


class TcpLink:
    """One framed TCP connection, either dialled out or accepted."""

    def __init__(self, on_frame: Callable[[bytes], None] | None = None):
        self.on_frame = on_frame
        self.frames: queue.Queue[bytes] = queue.Queue()
        self._sock: socket.socket | None = None
        self._server: socket.socket | None = None
        self._lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._closed = threading.Event()

    @property
    def address(self) -> tuple[str, int] | None:
        if self._server is not None:
            return self._server.getsockname()[:2]
        return None

    @property
    def connected(self) -> bool:
        return self._sock is not None

    def connect(self, host: str, port: int, timeout: float = 2.0) -> None:
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._sock.settimeout(None)
        self._spawn(self._read_loop, self._sock)

    def listen(self, host: str, port: int) -> None:
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            srv.bind((host, port))
        except OSError:
            srv.close()
            raise
        srv.listen(1)
        self._server = srv
        self._spawn(self._accept_loop)

    def _spawn(self, target, *args) -> None:
        th = threading.Thread(target=target, args=args, daemon=True)
        th.start()
        self._threads.append(th)

    def _accept_loop(self) -> None:
        assert self._server is not None
        while not self._closed.is_set():
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            with self._lock:
                if self._sock is not None:
                    self._sock.close()
                self._sock = conn
            self._read_loop(conn)

    def _read_loop(self, sock: socket.socket) -> None:
        buf = b""
        while not self._closed.is_set():
            try:
                chunk = sock.recv(4096)
            except OSError:
                break
            if not chunk:
                break
            buf += chunk
            while b"\n" in buf:
                line, buf = buf.split(b"\n", 1)
                if self.on_frame is not None:
                    self.on_frame(line)
                else:
                    self.frames.put(line)
        with self._lock:
            if self._sock is sock:
                self._sock = None

    def send_line(self, payload: bytes) -> bool:
        if not payload.endswith(b"\n"):
            payload += b"\n"
        with self._lock:
            sock = self._sock
        if sock is None:
            return False
        try:
            sock.sendall(payload)
        except OSError as exc:
            log.warning("tcp send failed: %s", exc)
            return False
        return True

    def request(self, payload: bytes, timeout: float) -> bytes | None:
        """Send one frame and wait (wall clock) for the next reply frame."""
        if not self.send_line(payload):
            return None
        try:
            return self.frames.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        self._closed.set()
        for s in (self._sock, self._server):
            if s is not None:
                try:
                    s.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                s.close()
        self._sock = None
