"""Binary framing for traffic across the splitting point.

Layout, all little-endian, no padding::

    magic "MTLS" | version u8 | msg_type u8 | request_id u64 | body_len u32 | body

Tensor bodies (feature and raw-input requests)::

    ndims u8 | dims u32 x ndims | dtype u8 (0 = f32) | data f32 x prod(dims)

Prediction body::

    n_tasks u8 | per task: task_id u8 | n_classes u16 | logits f32 x n_classes

Error body::

    code u16 | utf8_len u16 | message bytes
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple, Sequence, Union

import numpy as np

from .errors import (
    BadMagicError,
    EncodingError,
    FramingError,
    UnsupportedDtypeError,
    VersionError,
)

MAGIC = b"MTLS"
VERSION = 1
HEADER = struct.Struct("<4sBBQI")
HEADER_SIZE = HEADER.size  # 18
DTYPE_F32 = 0
U32_MAX = 0xFFFFFFFF
U64_MAX = 0xFFFFFFFFFFFFFFFF


class MsgType(IntEnum):
    FEATURE_REQUEST = 0
    PREDICTION_RESPONSE = 1
    RAW_INPUT_REQUEST = 2
    ERROR = 3


class TaskLogits(NamedTuple):
    task_id: int
    logits: np.ndarray


class ErrorBody(NamedTuple):
    code: int
    message: str


Body = Union[np.ndarray, Sequence[TaskLogits], ErrorBody]


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    return a.shape == b.shape and np.array_equal(a.view(np.uint32), b.view(np.uint32))


@dataclass(eq=False)
class SplitFrame:
    msg_type: MsgType
    request_id: int
    body: Body = field(default=None)
    version: int = VERSION

    def __eq__(self, other) -> bool:
        if not isinstance(other, SplitFrame):
            return NotImplemented
        if (self.msg_type, self.request_id, self.version) != (other.msg_type, other.request_id, other.version):
            return False
        if self.msg_type in (MsgType.FEATURE_REQUEST, MsgType.RAW_INPUT_REQUEST):
            return _bits_equal(self.body, other.body)
        if self.msg_type == MsgType.PREDICTION_RESPONSE:
            return len(self.body) == len(other.body) and all(
                a.task_id == b.task_id and _bits_equal(a.logits, b.logits)
                for a, b in zip(self.body, other.body)
            )
        return tuple(self.body) == tuple(other.body)


def feature_request(request_id: int, feature: np.ndarray) -> SplitFrame:
    return SplitFrame(MsgType.FEATURE_REQUEST, request_id, np.asarray(feature, dtype=np.float32))


def raw_input_request(request_id: int, x: np.ndarray) -> SplitFrame:
    return SplitFrame(MsgType.RAW_INPUT_REQUEST, request_id, np.asarray(x, dtype=np.float32))


def prediction_response(request_id: int, logits: Sequence[np.ndarray]) -> SplitFrame:
    body = [TaskLogits(j, np.asarray(l, dtype=np.float32).reshape(-1)) for j, l in enumerate(logits)]
    return SplitFrame(MsgType.PREDICTION_RESPONSE, request_id, body)


def error_frame(request_id: int, code: int, message: str) -> SplitFrame:
    return SplitFrame(MsgType.ERROR, request_id, ErrorBody(code, message))


# ---------------------------------------------------------------------------
# encode


def _encode_tensor(arr) -> bytes:
    if not isinstance(arr, np.ndarray) or arr.dtype != np.float32:
        raise EncodingError(f"tensor body must be a float32 ndarray, got {type(arr).__name__}"
                            f"{'' if not isinstance(arr, np.ndarray) else ' ' + str(arr.dtype)}")
    if arr.ndim > 255:
        raise EncodingError(f"too many dimensions: {arr.ndim}")
    if any(d > U32_MAX for d in arr.shape):
        raise EncodingError(f"dimension exceeds u32: {arr.shape}")
    return (struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape) + bytes([DTYPE_F32])
            + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _encode_predictions(body) -> bytes:
    items = list(body)
    if len(items) > 255:
        raise EncodingError(f"at most 255 tasks per response, got {len(items)}")
    parts = [struct.pack("<B", len(items))]
    for item in items:
        task_id, logits = item
        logits = np.asarray(logits)
        if logits.dtype != np.float32 or logits.ndim != 1:
            raise EncodingError("logits must be a 1-D float32 array")
        if not 0 <= task_id <= 255 or logits.shape[0] > 0xFFFF:
            raise EncodingError(f"task {task_id} with {logits.shape[0]} classes does not fit the layout")
        parts.append(struct.pack("<BH", task_id, logits.shape[0]))
        parts.append(logits.astype("<f4").tobytes())
    return b"".join(parts)


def _encode_error(body) -> bytes:
    code, message = body
    msg = message.encode("utf-8")
    if not 0 <= code <= 0xFFFF or len(msg) > 0xFFFF:
        raise EncodingError("error code or message does not fit the layout")
    return struct.pack("<HH", code, len(msg)) + msg


def encode(frame: SplitFrame) -> bytes:
    try:
        mtype = MsgType(frame.msg_type)
    except ValueError:
        raise EncodingError(f"unknown message type {frame.msg_type}") from None
    if not 0 <= frame.version <= 255:
        raise EncodingError(f"version {frame.version} does not fit u8")
    if not 0 <= frame.request_id <= U64_MAX:
        raise EncodingError(f"request id {frame.request_id} does not fit u64")
    try:
        if mtype in (MsgType.FEATURE_REQUEST, MsgType.RAW_INPUT_REQUEST):
            body = _encode_tensor(frame.body)
        elif mtype == MsgType.PREDICTION_RESPONSE:
            body = _encode_predictions(frame.body)
        else:
            body = _encode_error(frame.body)
    except (TypeError, ValueError, struct.error) as exc:
        if isinstance(exc, EncodingError):
            raise
        raise EncodingError(f"malformed {mtype.name} body: {exc}") from exc
    if len(body) > U32_MAX:
        raise EncodingError("body exceeds u32 length")
    return HEADER.pack(MAGIC, frame.version, int(mtype), frame.request_id, len(body)) + body


# ---------------------------------------------------------------------------
# decode


class Header(NamedTuple):
    version: int
    msg_type: int
    request_id: int
    body_len: int


def parse_header(data: bytes) -> Header:
    """Validate the fixed 18-byte prefix; raises the matching protocol error."""
    if data[:len(MAGIC)] != MAGIC[:min(len(data), len(MAGIC))]:
        raise BadMagicError(f"bad magic {bytes(data[:4])!r}")
    if len(data) < HEADER_SIZE:
        raise FramingError(f"header truncated: {len(data)} of {HEADER_SIZE} bytes")
    _, version, mtype, rid, blen = HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise VersionError(f"unsupported protocol version {version}")
    if mtype not in MsgType._value2member_map_:
        raise VersionError(f"unknown message type {mtype}")
    return Header(version, mtype, rid, blen)


def _decode_tensor(body: bytes) -> np.ndarray:
    if len(body) < 1:
        raise FramingError("tensor body missing ndims")
    ndims = body[0]
    meta = 1 + 4 * ndims + 1
    if len(body) < meta:
        raise FramingError(f"tensor body truncated in dims ({len(body)} bytes)")
    dims = struct.unpack_from(f"<{ndims}I", body, 1)
    dtype = body[meta - 1]
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"unsupported dtype code {dtype}")
    count = math.prod(dims)
    if len(body) - meta != 4 * count:
        raise FramingError(f"tensor data holds {len(body) - meta} bytes, dims {dims} need {4 * count}")
    return np.frombuffer(body, dtype="<f4", count=count, offset=meta).astype(np.float32).reshape(dims)


def _decode_predictions(body: bytes) -> list[TaskLogits]:
    if len(body) < 1:
        raise FramingError("prediction body missing n_tasks")
    n = body[0]
    pos = 1
    out = []
    for _ in range(n):
        if len(body) < pos + 3:
            raise FramingError("prediction body truncated")
        tid, ncls = struct.unpack_from("<BH", body, pos)
        pos += 3
        if len(body) < pos + 4 * ncls:
            raise FramingError("prediction logits truncated")
        logits = np.frombuffer(body, dtype="<f4", count=ncls, offset=pos).astype(np.float32)
        pos += 4 * ncls
        out.append(TaskLogits(tid, logits))
    if pos != len(body):
        raise FramingError(f"{len(body) - pos} trailing bytes in prediction body")
    return out


def _decode_error(body: bytes) -> ErrorBody:
    if len(body) < 4:
        raise FramingError("error body truncated")
    code, mlen = struct.unpack_from("<HH", body, 0)
    if len(body) != 4 + mlen:
        raise FramingError(f"error message length {mlen} disagrees with body size {len(body)}")
    try:
        return ErrorBody(code, body[4:].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise FramingError(f"error message is not UTF-8: {exc}") from exc


def decode_body(header: Header, body: bytes) -> SplitFrame:
    mtype = MsgType(header.msg_type)
    if mtype in (MsgType.FEATURE_REQUEST, MsgType.RAW_INPUT_REQUEST):
        payload = _decode_tensor(body)
    elif mtype == MsgType.PREDICTION_RESPONSE:
        payload = _decode_predictions(body)
    else:
        payload = _decode_error(body)
    return SplitFrame(mtype, header.request_id, payload, header.version)


def decode(data: bytes) -> SplitFrame:
    """Inverse of :func:`encode`. Every input yields a frame or a ``WireError``."""
    data = bytes(data)
    if len(data) < len(MAGIC) and data == MAGIC[:len(data)]:
        raise FramingError(f"frame truncated to {len(data)} bytes")
    header = parse_header(data)
    available = len(data) - HEADER_SIZE
    if available < header.body_len:
        raise FramingError(f"declared body length {header.body_len}, only {available} bytes present")
    if available > header.body_len:
        raise FramingError(f"{available - header.body_len} trailing bytes after frame")
    return decode_body(header, data[HEADER_SIZE:])


# ---------------------------------------------------------------------------
# sizes


class PayloadSize(NamedTuple):
    payload: int
    overhead: int

    @property
    def total(self) -> int:
        return self.payload + self.overhead


def tensor_frame_size(shape: Sequence[int]) -> PayloadSize:
    """Payload bytes and fixed framing bytes of a tensor-carrying frame."""
    return PayloadSize(4 * math.prod(shape), HEADER_SIZE + 1 + 4 * len(shape) + 1)


def feature_payload_size(feature_len: int) -> PayloadSize:
    if feature_len < 0:
        raise ValueError(f"feature_len must be non-negative, got {feature_len}")
    return tensor_frame_size((feature_len,))


def prediction_frame_size(n_classes: Sequence[int]) -> PayloadSize:
    return PayloadSize(4 * sum(n_classes), HEADER_SIZE + 1 + 3 * len(n_classes))
