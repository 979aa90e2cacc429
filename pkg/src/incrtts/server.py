"""TCP streaming boundary: length-prefixed JSON frames carrying PCM audio.

Each frame on the wire is a 4-byte big-endian length followed by a UTF-8
JSON object.  Clients send ``submit`` frames tagged with a request tag of
their choosing; the server answers with interleaved ``chunk`` frames (16-bit
PCM, base64), one ``done`` frame per finished request, and ``error`` frames
for anything that went wrong.  Many requests can be in flight on one
connection; tags keep their streams apart.
"""

import base64
import json
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .domain import PipelineConfig
from .scheduler import ChunkStream, RequestCancelled, RequestFailed
from .vocoder import pcm16_decode, pcm16_encode

MAX_FRAME_BYTES = 1 << 20
_LENGTH_BYTES = 4


class ProtocolError(RuntimeError):
    """The peer sent a frame this protocol cannot accept."""


class TruncatedStream(RuntimeError):
    """The connection ended mid-request without done/error frames."""


def _read_exact(sock: socket.socket, count: int) -> bytes | None:
    """Reads exactly ``count`` bytes; None on clean EOF at a frame boundary."""
    buf = bytearray()
    while len(buf) < count:
        piece = sock.recv(count - len(buf))
        if not piece:
            if not buf:
                return None
            raise TruncatedStream("connection closed mid-frame")
        buf.extend(piece)
    return bytes(buf)


def recv_frame(sock: socket.socket) -> dict | None:
    """Reads one length-prefixed JSON frame; None on clean EOF."""
    header = _read_exact(sock, _LENGTH_BYTES)
    if header is None:
        return None
    length = int.from_bytes(header, "big")
    if length == 0:
        raise ProtocolError("zero-length frame")
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {length} bytes exceeds the {MAX_FRAME_BYTES} byte cap")
    payload = _read_exact(sock, length)
    if payload is None:
        raise TruncatedStream("connection closed before frame payload")
    try:
        message = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"undecodable frame: {exc}") from None
    if not isinstance(message, dict):
        raise ProtocolError("frame payload must be a JSON object")
    return message


def frame_bytes(message: dict) -> bytes:
    """Encodes one message as a length-prefixed JSON frame."""
    payload = json.dumps(message, separators=(",", ":")).encode("utf-8")
    if len(payload) > MAX_FRAME_BYTES:
        raise ProtocolError(f"outgoing frame of {len(payload)} bytes exceeds the cap")
    return len(payload).to_bytes(_LENGTH_BYTES, "big") + payload


def encode_samples(samples: np.ndarray) -> str:
    return base64.b64encode(pcm16_encode(samples)).decode("ascii")


def decode_samples(data: str) -> np.ndarray:
    return pcm16_decode(base64.b64decode(data.encode("ascii")))


class _Connection:
    """Server-side state for one client socket."""

    def __init__(self, sock: socket.socket, server: "TtsServer"):
        self.sock = sock
        self.server = server
        self.write_queue: queue.SimpleQueue = queue.SimpleQueue()
        self.tags_lock = threading.Lock()
        self.live_tags: set[str] = set()
        self.writer = threading.Thread(target=self._write_loop, daemon=True)
        self.reader = threading.Thread(target=self._read_loop, daemon=True)

    def start(self) -> None:
        self.writer.start()
        self.reader.start()

    def send(self, message: dict) -> None:
        self.write_queue.put(message)

    def close(self) -> None:
        self.write_queue.put(None)
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

    def _write_loop(self) -> None:
        while True:
            message = self.write_queue.get()
            if message is None:
                return
            try:
                self.sock.sendall(frame_bytes(message))
            except OSError:
                return

    def _read_loop(self) -> None:
        try:
            while True:
                try:
                    message = recv_frame(self.sock)
                except ProtocolError as exc:
                    self.send({"type": "error", "request_tag": "", "message": str(exc)})
                    break
                except (TruncatedStream, OSError):
                    break
                if message is None:
                    break
                self._handle(message)
        finally:
            # Give queued replies a moment to flush before tearing down.
            self.write_queue.put(None)
            self.writer.join(timeout=1.0)
            try:
                self.sock.close()
            except OSError:
                pass
            self.server._forget(self)

    def _handle(self, message: dict) -> None:
        tag = message.get("request_tag")
        if message.get("type") != "submit" or not isinstance(tag, str) or not tag:
            self.send(
                {"type": "error", "request_tag": tag if isinstance(tag, str) else "",
                 "message": "expected a submit frame with a request_tag"}
            )
            return
        text = message.get("text")
        if not isinstance(text, str) or not text:
            self.send({"type": "error", "request_tag": tag, "message": "submit needs non-empty text"})
            return
        with self.tags_lock:
            if tag in self.live_tags:
                self.send(
                    {"type": "error", "request_tag": tag, "message": f"tag {tag!r} already in flight"}
                )
                return
            self.live_tags.add(tag)
        try:
            _, stream = self.server.pipeline.submit(text)
        except Exception as exc:
            with self.tags_lock:
                self.live_tags.discard(tag)
            self.send({"type": "error", "request_tag": tag, "message": str(exc)})
            return
        threading.Thread(target=self._forward, args=(stream, tag), daemon=True).start()

    def _forward(self, stream: ChunkStream, tag: str) -> None:
        """Pumps one request's chunks from the pipeline onto the wire."""
        index = 0
        total = 0
        try:
            for chunk in stream:
                self.send(
                    {
                        "type": "chunk",
                        "request_tag": tag,
                        "chunk_index": index,
                        "sample_offset": chunk.sample_offset,
                        "samples": encode_samples(chunk.samples),
                    }
                )
                index += 1
                total += chunk.sample_count
            self.send({"type": "done", "request_tag": tag, "total_samples": total})
        except RequestFailed as exc:
            self.send({"type": "error", "request_tag": tag, "message": str(exc)})
        except RequestCancelled:
            self.send({"type": "error", "request_tag": tag, "message": "cancelled by shutdown"})
        finally:
            with self.tags_lock:
                self.live_tags.discard(tag)


class TtsServer:
    """Accept loop plus per-connection reader/writer/forwarder threads.

    Owns the lifecycle of the pipeline object it serves (anything with
    ``start``, ``stop``, and ``submit(text) -> (id, stream)``).
    """

    def __init__(self, pipeline, cfg: PipelineConfig, host: str = "127.0.0.1", port: int = 0):
        self.pipeline = pipeline
        self.cfg = cfg
        self._host = host
        self._port = port
        self._listener: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._connections: set[_Connection] = set()
        self._conn_lock = threading.Lock()
        self._stopping = threading.Event()

    @property
    def address(self) -> tuple[str, int]:
        if self._listener is None:
            raise RuntimeError("server is not running")
        return self._listener.getsockname()[:2]

    def start(self) -> "TtsServer":
        self.pipeline.start()
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self._host, self._port))
        listener.listen(128)
        # Closing a listener does not wake a blocked accept() on Linux, so
        # the accept loop polls the stop flag instead of blocking forever.
        listener.settimeout(0.2)
        self._listener = listener
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, _ = self._listener.accept()
            except TimeoutError:
                continue
            except OSError:
                return
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            connection = _Connection(sock, self)
            with self._conn_lock:
                self._connections.add(connection)
            connection.start()

    def _forget(self, connection: _Connection) -> None:
        with self._conn_lock:
            self._connections.discard(connection)

    def stop(self) -> None:
        """Closes the listener and every connection, then stops the pipeline."""
        self._stopping.set()
        if self._listener is not None:
            self._listener.close()
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2.0)
        with self._conn_lock:
            connections = list(self._connections)
        for connection in connections:
            connection.close()
        self.pipeline.stop()

    def __enter__(self) -> "TtsServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()


def serve(pipeline, cfg: PipelineConfig, host: str = "127.0.0.1", port: int = 0) -> TtsServer:
    """Starts a TtsServer; ``server.address`` carries the bound endpoint."""
    return TtsServer(pipeline, cfg, host, port).start()


@dataclass
class ClientResult:
    """Everything one tagged request produced at the client."""

    request_tag: str
    chunks: list[tuple[float, int, int, np.ndarray]] = field(default_factory=list)
    total_samples: int | None = None
    error: str | None = None

    @property
    def samples(self) -> np.ndarray:
        if not self.chunks:
            return np.zeros(0)
        return np.concatenate([c[3] for c in self.chunks])

    @property
    def contiguous(self) -> bool:
        offset = 0
        for _, _, sample_offset, samples in self.chunks:
            if sample_offset != offset:
                return False
            offset += samples.shape[0]
        return True


def run_client(
    address: tuple[str, int], texts_by_tag: dict[str, str], timeout: float = 30.0
) -> dict[str, ClientResult]:
    """Submits tagged requests on one connection and drains every stream.

    Chunks are recorded as ``(receive_seconds, chunk_index, sample_offset,
    samples)`` with times measured when the frame is parsed.  Raises
    TruncatedStream if the server goes away before every tag resolves.
    """
    if not texts_by_tag:
        raise ValueError("no requests")
    results = {tag: ClientResult(request_tag=tag) for tag in texts_by_tag}
    origin = time.perf_counter()
    with socket.create_connection(address, timeout=timeout) as sock:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        for tag, text in texts_by_tag.items():
            sock.sendall(frame_bytes({"type": "submit", "text": text, "request_tag": tag}))
        open_tags = set(texts_by_tag)
        while open_tags:
            message = recv_frame(sock)
            if message is None:
                raise TruncatedStream(f"server closed with {len(open_tags)} request(s) unresolved")
            now = time.perf_counter() - origin
            tag = message.get("request_tag")
            kind = message.get("type")
            if tag not in results:
                raise ProtocolError(f"server sent frame for unknown tag {tag!r}")
            if kind == "chunk":
                results[tag].chunks.append(
                    (now, message["chunk_index"], message["sample_offset"], decode_samples(message["samples"]))
                )
            elif kind == "done":
                results[tag].total_samples = message["total_samples"]
                open_tags.discard(tag)
            elif kind == "error":
                results[tag].error = message.get("message", "unknown error")
                open_tags.discard(tag)
            else:
                raise ProtocolError(f"unexpected frame type {kind!r}")
    return results


def request_audio(address: tuple[str, int], text: str, timeout: float = 30.0) -> ClientResult:
    """One-shot convenience client for a single text."""
    return run_client(address, {"r0": text}, timeout=timeout)["r0"]
