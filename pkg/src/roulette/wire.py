"""Binary framing between device and edge.

Frame layout (integers little-endian):

    magic "RLTE" | version u8 (0x01) | msg_type u8 | payload_len u32 | payload

Message types: 0x01 HELLO, 0x02 FORWARD, 0x03 LOGITS, 0x04 LOSS, 0x05 GRAD,
0x06 INFER, 0x07 PREDICTION, 0x7F ERROR.

Payloads:
    tensor      ndim u8, each dim u32, data f64 row-major
    HELLO       ir_width u32, n_classes u32, batch_max u32
    LOSS        loss value f64, then the tensor of per-sample gradients of
                the loss w.r.t. the returned logits
    PREDICTION  batch u32, then one class index u32 per sample
    ERROR       UTF-8 text; the prefix "dimension:" marks shape complaints
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, FrameError, TransportClosed
from .tensor import Array

MAGIC = b"RLTE"
PROTOCOL_VERSION = 1

HELLO = 0x01
FORWARD = 0x02
LOGITS = 0x03
LOSS = 0x04
GRAD = 0x05
INFER = 0x06
PREDICTION = 0x07
ERROR = 0x7F

MESSAGE_TYPES = {HELLO, FORWARD, LOGITS, LOSS, GRAD, INFER, PREDICTION, ERROR}

MAX_PAYLOAD = 64 * 1024 * 1024
MAX_BATCH = 4096
MAX_IR_WIDTH = 65536

_HEADER = struct.Struct("<4sBBI")

DIMENSION_PREFIX = "dimension:"


def encode_tensor(array) -> bytes:
    a = np.asarray(array, dtype="<f8", order="C")
    if a.ndim > 2:
        raise DimensionMismatch(f"rank {a.ndim} tensors not supported on the wire")
    parts = [struct.pack("<B", a.ndim)]
    for dim in a.shape:
        parts.append(struct.pack("<I", dim))
    parts.append(a.tobytes())
    return b"".join(parts)


def decode_tensor(payload: bytes, offset: int = 0) -> tuple[Array, int]:
    """Decode one tensor; returns (array, next offset)."""
    if len(payload) < offset + 1:
        raise FrameError("tensor payload truncated (ndim)")
    ndim = payload[offset]
    offset += 1
    if ndim > 2:
        raise FrameError(f"unsupported tensor rank {ndim}")
    shape = []
    for _ in range(ndim):
        if len(payload) < offset + 4:
            raise FrameError("tensor payload truncated (dims)")
        (dim,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        shape.append(dim)
    count = 1
    for dim in shape:
        count *= dim
    nbytes = count * 8
    if len(payload) < offset + nbytes:
        raise FrameError("tensor payload truncated (data)")
    data = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
    offset += nbytes
    return data.reshape(shape).copy(), offset


def encode_hello(ir_width: int, n_classes: int, batch_max: int) -> bytes:
    return struct.pack("<III", ir_width, n_classes, batch_max)


def decode_hello(payload: bytes) -> tuple[int, int, int]:
    if len(payload) != 12:
        raise FrameError(f"hello payload must be 12 bytes, got {len(payload)}")
    return struct.unpack("<III", payload)


def encode_loss(loss_value: float, logits_grad) -> bytes:
    return struct.pack("<d", float(loss_value)) + encode_tensor(logits_grad)


def decode_loss(payload: bytes) -> tuple[float, Array]:
    if len(payload) < 8:
        raise FrameError("loss payload truncated")
    (value,) = struct.unpack_from("<d", payload, 0)
    grad, offset = decode_tensor(payload, 8)
    if offset != len(payload):
        raise FrameError("trailing bytes in loss payload")
    return value, grad


def encode_prediction(classes) -> bytes:
    idx = np.asarray(classes, dtype=np.uint32)
    return struct.pack("<I", idx.size) + idx.astype("<u4").tobytes()


def decode_prediction(payload: bytes) -> np.ndarray:
    if len(payload) < 4:
        raise FrameError("prediction payload truncated")
    (batch,) = struct.unpack_from("<I", payload, 0)
    if len(payload) != 4 + 4 * batch:
        raise FrameError("prediction payload length mismatch")
    return np.frombuffer(payload, dtype="<u4", count=batch, offset=4).astype(np.int64)


def encode_error(text: str) -> bytes:
    return text.encode("utf-8")


def decode_error(payload: bytes) -> str:
    return payload.decode("utf-8", errors="replace")


def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(payload)} bytes exceeds the 64 MiB cap")
    return _HEADER.pack(MAGIC, PROTOCOL_VERSION, msg_type, len(payload)) + payload


@dataclass
class Frame:
    msg_type: int
    payload: bytes


class FrameStream:
    """Blocking frame reader/writer over a connected socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._closed = False

    def send(self, msg_type: int, payload: bytes = b"") -> None:
        try:
            self._sock.sendall(encode_frame(msg_type, payload))
        except OSError as exc:
            raise TransportClosed(f"send failed: {exc}") from None

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            try:
                chunk = self._sock.recv(remaining)
            except OSError as exc:
                raise TransportClosed(f"recv failed: {exc}") from None
            if not chunk:
                raise TransportClosed("peer closed the connection")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def recv(self) -> Frame:
        """Read one frame; FrameError on anything malformed, TransportClosed on EOF."""
        header = self._recv_exact(_HEADER.size)
        magic, version, msg_type, length = _HEADER.unpack(header)
        if magic != MAGIC:
            raise FrameError("bad frame magic")
        if version != PROTOCOL_VERSION:
            raise FrameError(f"unsupported protocol version {version}")
        if msg_type not in MESSAGE_TYPES:
            raise FrameError(f"unknown message type 0x{msg_type:02x}")
        if length > MAX_PAYLOAD:
            raise FrameError(f"payload of {length} bytes exceeds the 64 MiB cap")
        return Frame(msg_type=msg_type, payload=self._recv_exact(length))

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()


def loopback_pair() -> tuple[FrameStream, FrameStream]:
    """In-process byte-stream pair exercising the same framing code path."""
    left, right = socket.socketpair()
    return FrameStream(left), FrameStream(right)
