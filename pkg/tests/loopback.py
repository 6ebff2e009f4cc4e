"""Minimal raw-socket HTTP/1.1 server for transport tests.

Every connection has a reader thread that parses requests as soon as they
arrive and a responder thread that answers them in order, so requests the
client pipelines really do pile up server-side. ``max_outstanding`` records
the largest number of received-but-unanswered requests seen on any one
connection.
"""
from __future__ import annotations

import hashlib
import queue
import socket
import threading
import time
from dataclasses import dataclass


@dataclass
class ServerOptions:
    ranges: bool = True
    head_405: bool = False
    omit_length: bool = False  # no Content-Length; body delimited by close
    chunked: bool = False
    kill_after: int | None = None  # drop the connection after N responses
    no_pipeline: bool = False  # drop the connection when a second request is already waiting
    throttle: float | None = None  # bytes/s per connection
    respond_delay: float = 0.0  # pause before each response, lets pipelined requests accumulate


class LoopbackServer:
    def __init__(self, files: dict[str, bytes], **options):
        self.files = dict(files)
        self.opts = ServerOptions(**options)
        self._lock = threading.Lock()
        self.max_outstanding = 0
        self.requests = 0
        self.connections = 0
        self.range_requests = 0
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind(("127.0.0.1", 0))
        self._sock.listen(256)
        self.port = self._sock.getsockname()[1]
        self._stop = False
        self._conns: set[socket.socket] = set()
        self._thread = threading.Thread(target=self._accept, daemon=True)

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def sha256(self, path: str) -> str:
        return hashlib.sha256(self.files[path]).hexdigest()

    def reset_counters(self) -> None:
        with self._lock:
            self.max_outstanding = 0
            self.requests = 0
            self.connections = 0
            self.range_requests = 0

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        self._stop = True
        try:
            self._sock.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    # -- plumbing --------------------------------------------------------------------

    def _accept(self) -> None:
        while not self._stop:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self.connections += 1
                self._conns.add(conn)
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: socket.socket) -> None:
        reqs: queue.Queue = queue.Queue()
        state = {"pending": 0}
        plock = threading.Lock()

        def reader():
            rfile = conn.makefile("rb")
            try:
                while True:
                    line = rfile.readline()
                    if not line:
                        break
                    if not line.strip():
                        continue
                    method, path, _ = line.decode("latin-1").split(" ", 2)
                    headers = {}
                    while True:
                        h = rfile.readline()
                        if not h or h in (b"\r\n", b"\n"):
                            break
                        k, _, v = h.decode("latin-1").partition(":")
                        headers[k.strip().lower()] = v.strip()
                    with plock:
                        state["pending"] += 1
                        n = state["pending"]
                    with self._lock:
                        self.requests += 1
                        self.max_outstanding = max(self.max_outstanding, n)
                    reqs.put((method, path, headers))
            except (OSError, ValueError):
                pass
            finally:
                reqs.put(None)

        threading.Thread(target=reader, daemon=True).start()
        answered = 0
        try:
            while True:
                item = reqs.get()
                if item is None:
                    break
                if self.opts.respond_delay:
                    time.sleep(self.opts.respond_delay)
                # counted as answered once the response starts, so the server never
                # sees more outstanding requests than the client has unanswered
                with plock:
                    state["pending"] -= 1
                keep = self._respond(conn, *item)
                answered += 1
                with plock:
                    waiting = state["pending"]
                if not keep:
                    break
                if self.opts.kill_after is not None and answered >= self.opts.kill_after:
                    break
                if self.opts.no_pipeline and waiting > 0:
                    break
        except OSError:
            pass
        finally:
            with self._lock:
                self._conns.discard(conn)
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()

    def _send_body(self, conn: socket.socket, body: bytes) -> None:
        if not self.opts.throttle:
            conn.sendall(body)
            return
        step = max(1024, int(self.opts.throttle / 50))
        for i in range(0, len(body), step):
            t = time.monotonic()
            conn.sendall(body[i : i + step])
            lag = len(body[i : i + step]) / self.opts.throttle - (time.monotonic() - t)
            if lag > 0:
                time.sleep(lag)

    def _respond(self, conn: socket.socket, method: str, path: str, headers: dict) -> bool:
        o = self.opts
        if method == "HEAD" and o.head_405:
            conn.sendall(b"HTTP/1.1 405 Method Not Allowed\r\nContent-Length: 0\r\n\r\n")
            return True
        data = self.files.get(path)
        if data is None:
            conn.sendall(b"HTTP/1.1 404 Not Found\r\nContent-Length: 9\r\n\r\nnot found")
            return True
        status, body, extra = "200 OK", data, []
        rng = headers.get("range")
        if rng and o.ranges and rng.startswith("bytes="):
            a, _, b = rng[6:].partition("-")
            a = int(a)
            b = min(int(b) if b else len(data) - 1, len(data) - 1)
            if a >= len(data) or a > b:
                conn.sendall(f"HTTP/1.1 416 Range Not Satisfiable\r\nContent-Range: bytes */{len(data)}\r\nContent-Length: 0\r\n\r\n".encode())
                return True
            status, body = "206 Partial Content", data[a : b + 1]
            extra.append(f"Content-Range: bytes {a}-{b}/{len(data)}")
            with self._lock:
                self.range_requests += 1
        if o.ranges:
            extra.append("Accept-Ranges: bytes")
        keep = True
        if o.omit_length:
            extra.append("Connection: close")
            keep = False
        elif o.chunked and method == "GET":
            extra.append("Transfer-Encoding: chunked")
        else:
            extra.append(f"Content-Length: {len(body)}")
        head = f"HTTP/1.1 {status}\r\n" + "".join(h + "\r\n" for h in extra) + "\r\n"
        conn.sendall(head.encode("latin-1"))
        if method == "HEAD":
            return keep
        if o.chunked and not o.omit_length:
            for i in range(0, len(body), 65536):
                part = body[i : i + 65536]
                conn.sendall(f"{len(part):x}\r\n".encode())
                self._send_body(conn, part)
                conn.sendall(b"\r\n")
            conn.sendall(b"0\r\n\r\n")
        else:
            self._send_body(conn, body)
        return keep
