"""Online delivery: wire framing, lockstep sessions, and the serve stack.

Wire messages are `u32 body_len + u8 tag + body`. A sender session keeps a
decoder model: every payload it emits is decoded from its own bytes and
applied through the same code path a receiver uses, so the two sides hold
bit-identical scenes by construction. Serving pushes paced wire messages
over TCP and exposes decoded snapshots, per-frame payloads, and an
optional static bundle over HTTP for thin clients.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import queue
import socketserver
import struct
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np
import torch

from .codec import (
    MAX_BODY_BYTES,
    TAG_INIT,
    TAG_KEYCORR,
    TAG_MOTION,
    FramePayload,
    InitPayload,
    StreamHeader,
    decode_payload,
    encode_payload,
    read_container,
    write_container,
)
from .core import SceneState
from .corrector import apply_masked_residuals
from .motion import apply_motion

log = logging.getLogger(__name__)

TAG_WIRE_HEADER = 0x00


class StreamError(Exception):
    """Protocol violation on an otherwise well-formed byte stream."""


# --- framing ------------------------------------------------------------------


def frame_message(tag: int, body: bytes) -> bytes:
    """u32 body length, u8 tag, body."""
    if len(body) >= 1 << 32:
        raise ValueError("body too large for u32 framing")
    if len(body) > MAX_BODY_BYTES:
        raise ValueError("body exceeds size cap")
    return struct.pack("<IB", len(body), tag) + body


class MessageParser:
    """Incremental wire parser; tolerates arbitrary feed boundaries."""

    def __init__(self, max_body: int = MAX_BODY_BYTES):
        self.max_body = max_body
        self._buf = bytearray()

    def feed(self, data: bytes):
        self._buf.extend(data)

    @property
    def at_boundary(self) -> bool:
        """True when no partial message is buffered (clean end of stream)."""
        return len(self._buf) == 0

    def messages(self) -> Iterator[tuple[int, bytes]]:
        while len(self._buf) >= 5:
            blen, tag = struct.unpack("<IB", bytes(self._buf[:5]))
            if blen > self.max_body:
                raise StreamError(f"declared body length {blen} exceeds cap")
            if len(self._buf) < 5 + blen:
                return
            body = bytes(self._buf[5 : 5 + blen])
            del self._buf[: 5 + blen]
            yield tag, body


def parse_message(read: Callable[[int], bytes], max_body: int = MAX_BODY_BYTES) -> Optional[tuple[int, bytes]]:
    """Read one message from a blocking `read(n)`; None on clean end of stream.

    End of stream inside a message raises, distinguishing truncation from a
    normal close between messages.
    """

    def read_exact(n: int, allow_eos: bool) -> Optional[bytes]:
        chunks = bytearray()
        while len(chunks) < n:
            chunk = read(n - len(chunks))
            if not chunk:
                if allow_eos and not chunks:
                    return None
                raise StreamError("stream truncated mid-message")
            chunks.extend(chunk)
            allow_eos = False
        return bytes(chunks)

    head = read_exact(5, allow_eos=True)
    if head is None:
        return None
    blen, tag = struct.unpack("<IB", head)
    if blen > max_body:
        raise StreamError(f"declared body length {blen} exceeds cap")
    body = read_exact(blen, allow_eos=False) if blen else b""
    return tag, body


def pack_wire_header(header: StreamHeader, start_frame: int) -> bytes:
    return header.pack() + struct.pack("<I", start_frame)


def unpack_wire_header(body: bytes) -> tuple[StreamHeader, int]:
    header = StreamHeader.unpack(body)
    if len(body) != len(header.pack()) + 4:
        raise StreamError("wire header length mismatch")
    (start_frame,) = struct.unpack("<I", body[-4:])
    return header, start_frame


# --- payload application ------------------------------------------------------


def apply_payload(scene: Optional[SceneState], payload: FramePayload, frame_index: int) -> SceneState:
    """The one scene-update path both encoder and receivers run."""
    if isinstance(payload, InitPayload):
        out = payload.scene.clone()
        out.timestep = frame_index
        return out
    if scene is None:
        raise StreamError("scene update before initialization")
    if payload.tag == TAG_MOTION:
        return apply_motion(scene, payload.motion)
    if payload.tag == TAG_KEYCORR:
        return apply_masked_residuals(scene, payload.residuals)
    raise StreamError(f"unknown payload tag 0x{payload.tag:02x}")


class ReceiverSession:
    """Strictly ordered decoder state: INIT first, then the GoF grid."""

    def __init__(self, header: StreamHeader, start_frame: int = 0):
        self.header = header
        self.scene: Optional[SceneState] = None
        self.next_frame = start_frame
        self.start_frame = start_frame

    def expected_tag(self) -> int:
        t = self.next_frame
        if self.scene is None:
            return TAG_INIT
        s = self.header.gof_interval
        return TAG_KEYCORR if t % s == 0 else TAG_MOTION

    def apply(self, payload: FramePayload) -> SceneState:
        t = self.next_frame
        if self.header.frame_count and t >= self.header.frame_count:
            raise StreamError(f"payload past declared end ({t} >= {self.header.frame_count})")
        want = self.expected_tag()
        if payload.tag != want:
            if payload.tag == TAG_INIT:
                raise StreamError(f"frame {t}: INIT after session start")
            raise StreamError(f"frame {t}: expected tag 0x{want:02x}, got 0x{payload.tag:02x}")
        self.scene = apply_payload(self.scene, payload, t)
        self.next_frame = t + 1
        return self.scene

    def apply_record(self, tag: int, body: bytes) -> SceneState:
        return self.apply(decode_payload(tag, body, self.header))


def receiver_apply(session: ReceiverSession, payload: FramePayload) -> SceneState:
    return session.apply(payload)


class SenderSession:
    """Encoder side: emits records while mirroring the receiver's scene."""

    def __init__(self, header: StreamHeader):
        self.header = header
        self._model = ReceiverSession(header)
        self.records: list[tuple[int, bytes]] = []

    @property
    def scene(self) -> Optional[SceneState]:
        """The decoded-state model; train the next frame against this."""
        return self._model.scene

    @property
    def next_frame(self) -> int:
        return self._model.next_frame

    def push(self, payload: FramePayload) -> tuple[int, bytes]:
        tag, body = encode_payload(payload)
        self._model.apply_record(tag, body)
        self.records.append((tag, body))
        return tag, body

    def container(self) -> bytes:
        header = dataclasses.replace(self.header, frame_count=len(self.records))
        return write_container(header, self.records)


# --- decoded snapshots ----------------------------------------------------------

SNAPSHOT_FLOATS_PER_POINT = 3 + 4 + 3 + 1 + 12


def snapshot_bytes(scene: SceneState, frame_index: int) -> bytes:
    """u32 frame, u32 N, then row-major f32 planes in INIT attribute order."""
    n = scene.n_points
    f = lambda t: t.detach().to(torch.float32).numpy().astype("<f4").tobytes()
    return (
        struct.pack("<II", frame_index, n)
        + f(scene.mu)
        + f(scene.q)
        + f(scene.log_s)
        + f(scene.logit_sigma)
        + f(scene.sh)
    )


def parse_snapshot(raw: bytes) -> tuple[int, SceneState]:
    if len(raw) < 8:
        raise StreamError("snapshot too short")
    frame, n = struct.unpack("<II", raw[:8])
    expect = 8 + n * SNAPSHOT_FLOATS_PER_POINT * 4
    if len(raw) != expect:
        raise StreamError(f"snapshot length {len(raw)} != expected {expect}")
    # copy: frombuffer views on `bytes` are read-only, torch wants writable
    flat = np.frombuffer(raw, dtype="<f4", offset=8).copy()
    off = 0

    def take(count, shape):
        nonlocal off
        out = flat[off : off + count].reshape(shape)
        off += count
        return torch.from_numpy(np.ascontiguousarray(out))

    scene = SceneState(
        mu=take(3 * n, (n, 3)),
        q=take(4 * n, (n, 4)),
        log_s=take(3 * n, (n, 3)),
        logit_sigma=take(n, (n,)),
        sh=take(12 * n, (n, 4, 3)),
        timestep=frame,
    )
    return frame, scene


# --- serving --------------------------------------------------------------------


class _Subscriber:
    def __init__(self, maxsize: int = 64):
        self.queue: queue.Queue = queue.Queue(maxsize=maxsize)
        self.dropped = False


_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".map": "application/json",
    ".json": "application/json",
    ".png": "image/png",
    ".ico": "image/x-icon",
}


class StreamServer:
    """Plays a recorded stream to TCP subscribers and HTTP thin clients.

    The pacing clock is global: one position advances at `fps`, and every
    TCP subscriber receives the same wire bytes. Late joiners get the
    header plus the current decoded scene re-encoded as INIT. Slow clients
    are disconnected when their bounded send queue overflows.
    """

    def __init__(
        self,
        container: bytes,
        host: str = "127.0.0.1",
        tcp_port: int = 0,
        http_port: int = 0,
        fps: float = 30.0,
        web_root: Optional[str] = None,
    ):
        self.header, records = read_container(container)
        if not records:
            raise StreamError("empty stream")
        model = ReceiverSession(self.header)
        self.messages = [frame_message(tag, body) for tag, body in records]
        self.scenes = [model.apply_record(tag, body).clone() for tag, body in records]
        self.fps = fps
        self.web_root = Path(web_root).resolve() if web_root else None
        self.position = 0
        self._lock = threading.Lock()
        self._subs: list[_Subscriber] = []
        self._stop = threading.Event()
        self._init_cache: dict[int, bytes] = {}

        self._tcp = socketserver.ThreadingTCPServer((host, tcp_port), _TcpHandler, bind_and_activate=True)
        self._tcp.daemon_threads = True
        self._tcp.streamer = self
        self._http = ThreadingHTTPServer((host, http_port), _HttpHandler)
        self._http.daemon_threads = True
        self._http.streamer = self
        self._threads: list[threading.Thread] = []

    @property
    def tcp_address(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]

    @property
    def http_address(self) -> tuple[str, int]:
        return self._http.server_address[:2]

    def init_message(self, frame: int) -> bytes:
        """Wire INIT carrying the decoded scene at `frame`."""
        if frame == 0:
            return self.messages[0]
        if frame not in self._init_cache:
            tag, body = encode_payload(InitPayload(self.scenes[frame]))
            self._init_cache[frame] = frame_message(tag, body)
        return self._init_cache[frame]

    def subscribe(self) -> tuple[int, list[bytes], _Subscriber]:
        with self._lock:
            start = self.position
            sub = _Subscriber()
            self._subs.append(sub)
        greeting = [
            frame_message(TAG_WIRE_HEADER, pack_wire_header(self.header, start)),
            self.init_message(start),
        ]
        return start, greeting, sub

    def unsubscribe(self, sub: _Subscriber):
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)

    def _broadcast(self, item):
        with self._lock:
            subs = list(self._subs)
        for sub in subs:
            try:
                sub.queue.put_nowait(item)
            except queue.Full:
                sub.dropped = True
                log.warning("disconnecting slow client: send queue overflow")
                try:
                    sub.queue.put_nowait(None)
                except queue.Full:
                    pass

    def _pace(self):
        while not self._stop.is_set():
            if self.position + 1 >= len(self.messages):
                break
            if self._stop.wait(1.0 / self.fps):
                break
            with self._lock:
                self.position += 1
                pos = self.position
            self._broadcast(self.messages[pos])
        self._broadcast(None)

    def start(self):
        for fn in (self._pace, self._tcp.serve_forever, self._http.serve_forever):
            th = threading.Thread(target=fn, daemon=True)
            th.start()
            self._threads.append(th)

    def stop(self):
        self._stop.set()
        self._tcp.shutdown()
        self._http.shutdown()
        self._tcp.server_close()
        self._http.server_close()

    def serve_until_interrupt(self):
        self.start()
        try:
            while True:
                self._stop.wait(0.5)
                if self._stop.is_set():
                    break
        except KeyboardInterrupt:
            log.info("interrupt: shutting down")
        finally:
            self.stop()


class _TcpHandler(socketserver.BaseRequestHandler):
    def handle(self):
        streamer: StreamServer = self.server.streamer
        self.request.settimeout(10.0)
        start, greeting, sub = streamer.subscribe()
        log.info("client %s joined at frame %d", self.client_address, start)
        try:
            for msg in greeting:
                self.request.sendall(msg)
            while True:
                try:
                    item = sub.queue.get(timeout=30.0)
                except queue.Empty:
                    break
                if item is None or sub.dropped:
                    break
                self.request.sendall(item)
        except (OSError, TimeoutError) as e:
            log.info("client %s disconnected: %s", self.client_address, e)
        finally:
            streamer.unsubscribe(sub)


class _HttpHandler(BaseHTTPRequestHandler):
    server_version = "gstream"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("http %s " + fmt, self.client_address, *args)

    def _send(self, status: int, content_type: str, payload: bytes):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(payload)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(payload)

    def _error(self, status: int, message: str):
        self._send(status, "application/json", json.dumps({"error": message}).encode())

    def do_GET(self):
        streamer: StreamServer = self.server.streamer
        path = self.path.split("?", 1)[0]
        if path == "/api/header":
            h = streamer.header
            with streamer._lock:
                pos = streamer.position
            doc = {
                "n_points": h.n_points,
                "sh_degree": h.sh_degree,
                "gof_interval": h.gof_interval,
                "k": h.k,
                "tau_adap": h.tau_adap,
                "phi_thres": h.phi_thres,
                "frame_count": len(streamer.messages),
                "current_frame": pos,
                "fps": streamer.fps,
            }
            self._send(200, "application/json", json.dumps(doc).encode())
            return
        for prefix, fn in (("/api/snapshot/", self._snapshot), ("/api/payload/", self._payload)):
            if path.startswith(prefix):
                try:
                    frame = int(path[len(prefix):])
                except ValueError:
                    self._error(400, "frame index must be an integer")
                    return
                fn(streamer, frame)
                return
        self._static(streamer, path)

    def _snapshot(self, streamer: StreamServer, frame: int):
        if not (0 <= frame < len(streamer.scenes)):
            self._error(404, f"frame {frame} out of range")
            return
        self._send(200, "application/octet-stream", snapshot_bytes(streamer.scenes[frame], frame))

    def _payload(self, streamer: StreamServer, frame: int):
        if not (0 <= frame < len(streamer.messages)):
            self._error(404, f"frame {frame} out of range")
            return
        self._send(200, "application/octet-stream", streamer.messages[frame])

    def _static(self, streamer: StreamServer, path: str):
        if streamer.web_root is None:
            self._error(404, "no static bundle configured")
            return
        rel = path.lstrip("/") or "index.html"
        target = (streamer.web_root / rel).resolve()
        if not str(target).startswith(str(streamer.web_root)) or not target.is_file():
            self._error(404, "not found")
            return
        ctype = _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        self._send(200, ctype, target.read_bytes())
