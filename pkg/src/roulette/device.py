"""Device-side session: private forward upload, gradient download, inference.

The device owns the trainable front partition. Every representation that
leaves the device goes through the private transformation first; raw inputs,
raw labels, and the key never touch the wire. For training rounds the device
computes the loss locally and uploads only its scalar value plus the
per-sample gradient w.r.t. the returned logits, which is what the edge needs
to start its backward pass.
"""

from __future__ import annotations

import numpy as np

from . import wire
from .dp import DpConfig, DpForward, PrivacyReceipt, dp_backward, dp_forward
from .errors import DimensionMismatch, ProtocolViolation, TransportClosed
from .keygen import Permutation
from .tensor import Array, Layer, as_batch, in_width, out_width
from .wire import FrameStream


class DeviceSession:
    """One protocol session driven by the device.

    Methods must follow the round structure: hello once, then forward and
    backward in pairs (or infer between rounds). Out-of-order calls and
    unexpected replies raise ProtocolViolation and close the session.
    """

    def __init__(self, stream: FrameStream, front_layers: list[Layer],
                 n_classes: int, batch_max: int = 256):
        ir = out_width(front_layers)
        if ir is None:
            raise DimensionMismatch("front partition needs at least one affine layer")
        self.stream = stream
        self.front_layers = front_layers
        self.ir_width = ir
        self.n_classes = n_classes
        self.batch_max = batch_max
        self.phase = "idle"
        self._record: DpForward | None = None
        self._logits: Array | None = None
        self.last_receipt: PrivacyReceipt | None = None

    # -- protocol steps ----------------------------------------------------

    def hello(self) -> None:
        self._require_phase("idle")
        self.stream.send(wire.HELLO, wire.encode_hello(
            self.ir_width, self.n_classes, self.batch_max))
        self.phase = "ready"

    def forward(self, x_l, dp_cfg: DpConfig, rng: np.random.Generator) -> Array:
        """Private transform, upload, return the edge's logits for the batch."""
        self._require_phase("ready")
        x_l = as_batch(x_l, in_width(self.front_layers))
        if x_l.shape[0] > self.batch_max:
            raise DimensionMismatch(
                f"batch {x_l.shape[0]} exceeds negotiated maximum {self.batch_max}")
        record = dp_forward(self.front_layers, x_l, dp_cfg, rng)
        self.stream.send(wire.FORWARD, wire.encode_tensor(record.output))
        frame = self._recv(expected=wire.LOGITS)
        logits, offset = wire.decode_tensor(frame.payload)
        if offset != len(frame.payload):
            self._fail("trailing bytes in logits payload")
        if logits.shape != (x_l.shape[0], self.n_classes):
            self._fail(f"logits shape {logits.shape} does not match the batch")
        self._record = record
        self._logits = logits
        self.last_receipt = record.receipt
        self.phase = "logits"
        return logits

    def backward(self, loss_value: float, logits_grad) -> tuple[list, Array]:
        """Upload the loss, download d loss / d representation, and chain it
        through the private transformation.

        Returns (front parameter gradients, gradient w.r.t. the raw input).
        """
        self._require_phase("logits")
        grad = as_batch(logits_grad)
        if grad.shape != self._logits.shape:
            raise DimensionMismatch(
                f"logits grad shape {grad.shape} != logits shape {self._logits.shape}")
        self.stream.send(wire.LOSS, wire.encode_loss(loss_value, grad))
        frame = self._recv(expected=wire.GRAD)
        ir_grad, offset = wire.decode_tensor(frame.payload)
        if offset != len(frame.payload):
            self._fail("trailing bytes in grad payload")
        if ir_grad.shape != self._record.output.shape:
            self._fail(f"grad shape {ir_grad.shape} does not match the uploaded tensor")
        param_grads, input_grad = dp_backward(self.front_layers, self._record, ir_grad)
        self.phase = "ready"
        self._record = None
        self._logits = None
        return param_grads, input_grad

    @property
    def protected_output(self) -> Array:
        """The representation uploaded by the in-flight round."""
        if self._record is None:
            raise ProtocolViolation("no round in flight")
        return self._record.output

    def chain_front_grad(self, upstream) -> tuple[list, Array]:
        """Backward through the private transform for an auxiliary objective
        on the uploaded representation; does not consume the round."""
        if self._record is None:
            raise ProtocolViolation("no round in flight")
        return dp_backward(self.front_layers, self._record, upstream)

    def infer(self, x_l, dp_cfg: DpConfig, rng: np.random.Generator) -> np.ndarray:
        """Private transform, upload, return the edge's raw argmax indices."""
        self._require_phase("ready")
        x_l = as_batch(x_l, in_width(self.front_layers))
        if x_l.shape[0] > self.batch_max:
            raise DimensionMismatch(
                f"batch {x_l.shape[0]} exceeds negotiated maximum {self.batch_max}")
        record = dp_forward(self.front_layers, x_l, dp_cfg, rng)
        self.stream.send(wire.INFER, wire.encode_tensor(record.output))
        frame = self._recv(expected=wire.PREDICTION)
        classes = wire.decode_prediction(frame.payload)
        if classes.shape[0] != x_l.shape[0]:
            self._fail("prediction count does not match the batch")
        self.last_receipt = record.receipt
        return classes

    def close(self) -> None:
        self.phase = "closed"
        self.stream.close()

    # -- helpers -----------------------------------------------------------

    def _require_phase(self, phase: str) -> None:
        if self.phase != phase:
            raise ProtocolViolation(
                f"operation requires phase {phase!r}, session is in {self.phase!r}")

    def _fail(self, text: str) -> None:
        self.close()
        raise ProtocolViolation(text)

    def _recv(self, expected: int) -> wire.Frame:
        try:
            frame = self.stream.recv()
        except (wire.FrameError, TransportClosed):
            self.phase = "closed"
            raise
        if frame.msg_type == wire.ERROR:
            text = wire.decode_error(frame.payload)
            self.close()
            if text.startswith(wire.DIMENSION_PREFIX):
                raise DimensionMismatch(text)
            raise ProtocolViolation(text)
        if frame.msg_type != expected:
            self._fail(f"expected message 0x{expected:02x}, got 0x{frame.msg_type:02x}")
        return frame


def infer_roundtrip(session: DeviceSession, x_l, dp_cfg: DpConfig,
                    key: Permutation, rng: np.random.Generator) -> np.ndarray:
    """Decrypted predictions: the key's inverse applied to the edge argmax."""
    raw = session.infer(x_l, dp_cfg, rng)
    return key.decrypt_labels(raw)
