"""Edge/server endpoints, a simulated channel and a stream-socket transport."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import wire
from .errors import ConfigError, ProtocolError, RemoteError, TransportError, WireError
from .model import PART_BACKBONE, PART_FULL, PART_HEADS, MtlModel, backbone_forward, head_forward, predict_all
from .rng import Rng
from .wire import MsgType, SplitFrame

log = logging.getLogger(__name__)

SC = "SC"
ROC = "RoC"
LOC = "LoC"

ERR_BAD_MAGIC = 1
ERR_VERSION = 2
ERR_FRAMING = 3
ERR_DTYPE = 4
ERR_BAD_REQUEST = 5
ERR_MODE = 6
ERR_INTERNAL = 7

DEFAULT_TIMEOUT = 5.0
MAX_BODY = 256 * 1024 * 1024
GIGABIT = 125_000_000.0  # bytes per second


@dataclass(frozen=True)
class ChannelModel:
    bandwidth: float = GIGABIT  # bytes/s
    propagation_delay: float = 0.0  # s, one way
    per_message_overhead: float = 0.0  # s
    jitter: float = 0.0  # s, uniform upper bound

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ConfigError(f"bandwidth must be positive, got {self.bandwidth}")
        if min(self.propagation_delay, self.per_message_overhead, self.jitter) < 0:
            raise ConfigError("delays must be non-negative")

    @classmethod
    def from_config(cls, d: dict) -> "ChannelModel":
        """Run-config form: bandwidth in bits/s, delays in milliseconds."""
        return cls(
            bandwidth=float(d.get("bandwidth_bps", 1e9)) / 8.0,
            propagation_delay=float(d.get("propagation_delay_ms", 0.0)) / 1e3,
            per_message_overhead=float(d.get("per_message_overhead_ms", 0.0)) / 1e3,
            jitter=float(d.get("jitter_ms", 0.0)) / 1e3,
        )

    def to_config(self) -> dict:
        return {
            "bandwidth_bps": self.bandwidth * 8.0,
            "propagation_delay_ms": self.propagation_delay * 1e3,
            "per_message_overhead_ms": self.per_message_overhead * 1e3,
            "jitter_ms": self.jitter * 1e3,
        }


def simulate_transfer(nbytes: int, ch: ChannelModel, rng: Rng | None = None) -> float:
    """Seconds to move one message of ``nbytes`` across ``ch``."""
    if nbytes < 0:
        raise ValueError(f"byte count must be non-negative, got {nbytes}")
    t = ch.per_message_overhead + ch.propagation_delay + nbytes / ch.bandwidth
    if ch.jitter > 0:
        if rng is None:
            raise ValueError("a jittered channel needs an rng")
        t += float(rng.uniform(0.0, ch.jitter, 1)[0])
    return t


# ---------------------------------------------------------------------------
# endpoints


class ServerEndpoint:
    """Head server. In SC mode it holds only the heads; in RoC mode the whole model."""

    def __init__(self, model: MtlModel, mode: str = SC):
        if mode == SC:
            if model.part == PART_FULL:
                model = model.split()[1]
            elif model.part != PART_HEADS:
                raise ConfigError(f"SC server needs the heads slice, got {model.part}")
        elif mode == ROC:
            if model.part != PART_FULL:
                raise ConfigError("RoC server needs the full model")
        else:
            raise ConfigError(f"unknown mode {mode!r}")
        self.model = model
        self.mode = mode

    def handle(self, frame: SplitFrame) -> SplitFrame:
        rid = frame.request_id
        try:
            if frame.msg_type == MsgType.FEATURE_REQUEST:
                z = frame.body
                if z.shape != (self.model.feature_len,):
                    return wire.error_frame(rid, ERR_BAD_REQUEST,
                                            f"feature shape {z.shape}, expected ({self.model.feature_len},)")
                logits = [head_forward(self.model, j, z).data for j in range(self.model.n_tasks)]
                return wire.prediction_response(rid, logits)
            if frame.msg_type == MsgType.RAW_INPUT_REQUEST:
                if self.mode != ROC:
                    return wire.error_frame(rid, ERR_MODE, "raw input requests need a RoC server")
                x = frame.body
                if x.shape != self.model.config.input_shape:
                    return wire.error_frame(rid, ERR_BAD_REQUEST,
                                            f"input shape {x.shape}, expected {self.model.config.input_shape}")
                return wire.prediction_response(rid, [l.data for l in predict_all(self.model, x)])
            return wire.error_frame(rid, ERR_BAD_REQUEST, f"server does not accept {frame.msg_type.name}")
        except Exception as exc:  # a bad request must never take the server down
            log.exception("request %d failed", rid)
            return wire.error_frame(rid, ERR_INTERNAL, f"{type(exc).__name__}: {exc}")

    def handle_bytes(self, data: bytes) -> bytes:
        """One encoded request in, one encoded response (possibly an Error frame) out."""
        try:
            frame = wire.decode(data)
        except WireError as exc:
            return wire.encode(wire.error_frame(_rid_of(data), exc.code, str(exc)))
        return wire.encode(self.handle(frame))


def _rid_of(data: bytes) -> int:
    if len(data) >= wire.HEADER_SIZE and data[:4] == wire.MAGIC:
        return int.from_bytes(data[6:14], "little")
    return 0


class EdgeEndpoint:
    """Edge device. SC: holds the backbone slice only. RoC: ships raw inputs."""

    def __init__(self, model: MtlModel | None = None, mode: str = SC):
        if mode == SC:
            if model is None:
                raise ConfigError("SC edge needs the backbone")
            if model.part == PART_FULL:
                model = model.split()[0]
            elif model.part != PART_BACKBONE:
                raise ConfigError(f"SC edge needs the backbone slice, got {model.part}")
        elif mode != ROC:
            raise ConfigError(f"unknown mode {mode!r}")
        self.model = model if mode == SC else None
        self.mode = mode
        self._next_id = 0
        self._lock = threading.Lock()

    def next_request_id(self) -> int:
        with self._lock:
            rid = self._next_id
            self._next_id += 1
        return rid


class Transport(Protocol):
    def roundtrip(self, frame: SplitFrame) -> SplitFrame: ...

    def close(self) -> None: ...


def edge_infer(endpoint: EdgeEndpoint, x, transport: Transport) -> list[np.ndarray]:
    """Run one input across the split; returns logits ordered by task id."""
    rid = endpoint.next_request_id()
    x = np.asarray(x, dtype=np.float32)
    if endpoint.mode == SC:
        z = backbone_forward(endpoint.model, x).data
        req = wire.feature_request(rid, z.reshape(-1))
    else:
        req = wire.raw_input_request(rid, x)
    resp = transport.roundtrip(req)
    if resp.msg_type == MsgType.ERROR:
        raise RemoteError(resp.body.code, resp.body.message)
    if resp.request_id != rid:
        raise ProtocolError(f"response id {resp.request_id} does not match request {rid}")
    if resp.msg_type != MsgType.PREDICTION_RESPONSE:
        raise ProtocolError(f"expected a prediction, got {resp.msg_type.name}")
    return [t.logits for t in sorted(resp.body, key=lambda t: t.task_id)]


# ---------------------------------------------------------------------------
# transports


@dataclass
class TransferRecord:
    request_bytes: int
    response_bytes: int
    seconds: float


@dataclass
class LoopbackTransport:
    """In-process transport that charges each message to a simulated channel."""

    server: ServerEndpoint
    channel: ChannelModel | None = None
    rng: Rng | None = None
    records: list[TransferRecord] = field(default_factory=list)

    def roundtrip(self, frame: SplitFrame) -> SplitFrame:
        req = wire.encode(frame)
        resp = self.server.handle_bytes(req)
        secs = 0.0
        if self.channel is not None:
            secs = simulate_transfer(len(req), self.channel, self.rng) + simulate_transfer(
                len(resp), self.channel, self.rng)
        self.records.append(TransferRecord(len(req), len(resp), secs))
        return wire.decode(resp)

    @property
    def elapsed(self) -> float:
        return sum(r.seconds for r in self.records)

    def close(self) -> None:
        pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise TransportError("connection closed by peer")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> SplitFrame:
    head = _recv_exact(sock, wire.HEADER_SIZE)
    header = wire.parse_header(head)
    return wire.decode(head + _recv_exact(sock, header.body_len))


class SocketTransport:
    """Synchronous request/response client over a stream socket."""

    def __init__(self, host: str, port: int, timeout: float = DEFAULT_TIMEOUT):
        self.address = (host, port)
        self.timeout = timeout
        self._sock: socket.socket | None = None

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self.address, timeout=self.timeout)
            except OSError as exc:
                raise TransportError(f"cannot connect to {self.address[0]}:{self.address[1]}: {exc}") from exc
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return self._sock

    def send_raw(self, data: bytes) -> None:
        try:
            self._connect().sendall(data)
        except OSError as exc:
            self.close()
            raise TransportError(f"send to {self.address[0]}:{self.address[1]} failed: {exc}") from exc

    def receive(self) -> SplitFrame:
        sock = self._connect()
        try:
            return read_frame(sock)
        except socket.timeout as exc:
            self.close()
            raise TransportError(f"timed out after {self.timeout}s waiting for a response") from exc
        except OSError as exc:
            self.close()
            raise TransportError(f"receive failed: {exc}") from exc

    def roundtrip(self, frame: SplitFrame) -> SplitFrame:
        self.send_raw(wire.encode(frame))
        return self.receive()

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# server


class FrameAssembler:
    """Cuts a byte stream into request frames, classifying anything malformed."""

    def __init__(self, max_body: int = MAX_BODY):
        self.buf = bytearray()
        self.max_body = max_body

    def feed(self, data: bytes) -> None:
        self.buf += data

    def _resync(self) -> None:
        k = self.buf.find(wire.MAGIC, 1)
        if k >= 0:
            del self.buf[:k]
            return
        # keep a trailing partial magic, drop the rest
        for keep in (3, 2, 1):
            if len(self.buf) >= keep and bytes(self.buf[-keep:]) == wire.MAGIC[:keep]:
                del self.buf[:-keep]
                return
        self.buf.clear()

    def next(self) -> tuple[bytes | None, SplitFrame | None]:
        """(complete frame bytes, None), (None, error frame) or (None, None) when more input is needed."""
        buf = self.buf
        if not buf:
            return None, None
        n = min(len(buf), 4)
        if bytes(buf[:n]) != wire.MAGIC[:n]:
            self._resync()
            return None, wire.error_frame(0, ERR_BAD_MAGIC, "bad magic")
        if len(buf) < wire.HEADER_SIZE:
            return None, None
        blen = int.from_bytes(buf[14:18], "little")
        rid = int.from_bytes(buf[6:14], "little")
        if blen > self.max_body:
            self._resync()
            return None, wire.error_frame(rid, ERR_FRAMING, f"body length {blen} exceeds {self.max_body}")
        if len(buf) < wire.HEADER_SIZE + blen:
            return None, None
        frame = bytes(buf[:wire.HEADER_SIZE + blen])
        del buf[:wire.HEADER_SIZE + blen]
        return frame, None

    def flush_partial(self) -> SplitFrame | None:
        """Give up on a stalled partial frame."""
        if not self.buf:
            return None
        rid = _rid_of(bytes(self.buf))
        self.buf.clear()
        return wire.error_frame(rid, ERR_FRAMING, "incomplete frame timed out")


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv: HeadTCPServer = self.server
        sock: socket.socket = self.request
        sock.settimeout(srv.poll_interval)
        asm = FrameAssembler()
        last_data = time.monotonic()
        while not srv.stopping.is_set():
            while True:
                frame_bytes, err = asm.next()
                if frame_bytes is not None:
                    reply = srv.endpoint.handle_bytes(frame_bytes)
                elif err is not None:
                    reply = wire.encode(err)
                else:
                    break
                try:
                    sock.sendall(reply)
                except OSError:
                    return
            try:
                chunk = sock.recv(1 << 16)
            except socket.timeout:
                if asm.buf and time.monotonic() - last_data > srv.partial_timeout:
                    err = asm.flush_partial()
                    try:
                        sock.sendall(wire.encode(err))
                    except OSError:
                        return
                continue
            except OSError:
                return
            if not chunk:
                return
            last_data = time.monotonic()
            asm.feed(chunk)


class HeadTCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, endpoint: ServerEndpoint, *, partial_timeout: float = 1.0,
                 poll_interval: float = 0.1):
        self.endpoint = endpoint
        self.partial_timeout = partial_timeout
        self.poll_interval = poll_interval
        self.stopping = threading.Event()
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def stop(self) -> None:
        self.stopping.set()
        self.shutdown()
        self.server_close()


def start_server(endpoint: ServerEndpoint, host: str = "127.0.0.1", port: int = 0, **kw) -> HeadTCPServer:
    """Bind and serve on a background thread; ``port=0`` picks a free port."""
    try:
        srv = HeadTCPServer((host, port), endpoint, **kw)
    except OSError as exc:
        raise TransportError(f"cannot bind {host}:{port}: {exc}") from exc
    threading.Thread(target=srv.serve_forever, kwargs={"poll_interval": 0.1}, daemon=True).start()
    return srv


def serve(endpoint: ServerEndpoint, host: str, port: int, stop: threading.Event) -> None:
    """Serve until ``stop`` is set, then shut down cleanly."""
    srv = start_server(endpoint, host, port)
    log.info("serving %s heads on %s:%d", endpoint.mode, host, srv.port)
    try:
        stop.wait()
    finally:
        srv.stop()


# ---------------------------------------------------------------------------
# paradigm comparison


@dataclass
class TransferReport:
    paradigm: str
    n_inputs: int
    request_payload_bytes: int
    request_frame_bytes: int
    response_frame_bytes: int
    request_seconds: float
    framing_seconds: float
    response_seconds: float

    @property
    def total_seconds(self) -> float:
        return self.request_seconds + self.framing_seconds + self.response_seconds

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["total_seconds"] = self.total_seconds
        return d


def transfer_time_report(paradigm: str, n_inputs: int, input_shape: Sequence[int], feature_len: int,
                         ch: ChannelModel, n_classes: Sequence[int] = (), rng: Rng | None = None) -> TransferReport:
    """Channel time for ``n_inputs`` inferences under LoC, RoC or SC.

    ``request_seconds`` charges each request payload through :func:`simulate_transfer`;
    frame headers and the prediction responses are itemized separately.
    """
    if paradigm == LOC:
        return TransferReport(LOC, n_inputs, 0, 0, 0, 0.0, 0.0, 0.0)
    if paradigm == ROC:
        size = wire.tensor_frame_size(tuple(input_shape))
    elif paradigm == SC:
        size = wire.feature_payload_size(feature_len)
    else:
        raise ConfigError(f"unknown paradigm {paradigm!r}")
    resp = wire.prediction_frame_size(n_classes) if n_classes else wire.PayloadSize(0, 0)
    req_s = sum(simulate_transfer(size.payload, ch, rng) for _ in range(n_inputs))
    framing_s = n_inputs * size.overhead / ch.bandwidth
    resp_s = sum(simulate_transfer(resp.total, ch, rng) for _ in range(n_inputs)) if n_classes else 0.0
    return TransferReport(paradigm, n_inputs, size.payload, size.total, resp.total, req_s, framing_s, resp_s)
