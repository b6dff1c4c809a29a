"""Message transports between the server and clients.

Routing follows the message kind: uploads go to the server, model
broadcasts to every client, aggregate broadcasts to the named client.
"""
from __future__ import annotations

import queue
import socket
import threading
from collections import Counter, deque

from .wire import FrameError, MessageKind, RoundMessage, decode_message, encode_message, frame_size

SERVER = "server"


class TransportError(RuntimeError):
    pass


class _Router:
    def __init__(self, client_ids):
        self.client_ids = sorted(client_ids)
        self.sent: Counter = Counter()
        self.received: Counter = Counter()

    def destinations(self, m: RoundMessage) -> list:
        if m.kind in (MessageKind.MODEL_UPLOAD, MessageKind.HIDDEN_UPLOAD):
            return [SERVER]
        if m.kind is MessageKind.MODEL_BROADCAST:
            return list(self.client_ids)
        if m.client_id not in self.client_ids:
            raise TransportError(f"no client {m.client_id} registered")
        return [m.client_id]

    def note_sent(self, m: RoundMessage) -> None:
        sender = SERVER if m.kind in (MessageKind.MODEL_BROADCAST, MessageKind.AGG_BROADCAST) else m.client_id
        self.sent[(sender, m.kind)] += 1

    def note_received(self, endpoint, m: RoundMessage) -> None:
        self.received[(endpoint, m.kind)] += 1


class InProcTransport(_Router):
    """Ordered in-memory queues; payloads are passed by reference."""

    def __init__(self, client_ids):
        super().__init__(client_ids)
        self._queues = {c: deque() for c in [SERVER, *self.client_ids]}

    def send(self, m: RoundMessage) -> None:
        targets = self.destinations(m)
        self.note_sent(m)
        for t in targets:
            self._queues[t].append(m)

    def recv(self, endpoint) -> RoundMessage:
        q = self._queues.get(endpoint)
        if q is None:
            raise TransportError(f"unknown endpoint {endpoint!r}")
        if not q:
            raise TransportError(f"no message waiting for {endpoint!r}")
        m = q.popleft()
        self.note_received(endpoint, m)
        return m

    def close(self) -> None:
        pass


class SocketTransport(_Router):
    """Every message is encoded, pushed through a local stream socket and decoded.

    A reader thread reassembles frames from the byte stream and routes the
    decoded messages to per-endpoint queues.
    """

    def __init__(self, client_ids, timeout: float = 60.0):
        super().__init__(client_ids)
        self.timeout = timeout
        self._out, self._in = socket.socketpair()
        self._queues = {c: queue.Queue() for c in [SERVER, *self.client_ids]}
        self._error: Exception | None = None
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        buf = bytearray()
        try:
            while True:
                chunk = self._in.recv(1 << 20)
                if not chunk:
                    break
                buf += chunk
                while True:
                    size = frame_size(buf)
                    if size is None or len(buf) < size:
                        break
                    m = decode_message(bytes(buf[:size]))
                    del buf[:size]
                    for t in self.destinations(m):
                        self._queues[t].put(m)
            if buf:
                raise FrameError("stream closed inside a frame")
        except (OSError, FrameError, TransportError) as exc:
            self._error = exc

    def send(self, m: RoundMessage) -> None:
        if self._error:
            raise TransportError(f"socket transport failed: {self._error}")
        self.destinations(m)
        self.note_sent(m)
        try:
            self._out.sendall(encode_message(m))
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def recv(self, endpoint) -> RoundMessage:
        q = self._queues.get(endpoint)
        if q is None:
            raise TransportError(f"unknown endpoint {endpoint!r}")
        try:
            m = q.get(timeout=self.timeout)
        except queue.Empty:
            raise TransportError(
                f"timed out waiting for a message to {endpoint!r}"
                + (f" ({self._error})" if self._error else "")
            ) from None
        self.note_received(endpoint, m)
        return m

    def close(self) -> None:
        # closing the write end gives the reader EOF
        try:
            self._out.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        self._reader.join(timeout=5)
        for s in (self._out, self._in):
            s.close()


def make_transport(kind: str, client_ids):
    if kind == "inproc":
        return InProcTransport(client_ids)
    if kind == "socket":
        return SocketTransport(client_ids)
    raise ValueError(f"unknown transport {kind!r}")
