"""Edge-side session handling: serve logits, gradients, and predictions
against a frozen back-end partition.

Each connection is one session with a strict message order: HELLO first,
then any sequence of FORWARD->LOSS pairs and INFER requests. Anything out
of order gets an ERROR reply and the connection is closed. Sessions are
isolated; the back-end parameters are shared read-only.
"""

from __future__ import annotations

import logging
import socket
import threading

import numpy as np

from . import wire
from .errors import FrameError, TransportClosed
from .tensor import Layer, backward, forward, in_width, out_width
from .wire import FrameStream

log = logging.getLogger(__name__)


class _SessionAbort(Exception):
    """Internal: reply already arranged, tear the session down."""


class EdgeServer:
    """Owns the frozen back-end partition and answers device sessions."""

    def __init__(self, back_layers: list[Layer], batch_max: int = wire.MAX_BATCH):
        ir = in_width(back_layers)
        n_out = out_width(back_layers)
        if ir is None or n_out is None:
            raise ValueError("back-end partition needs at least one affine layer")
        self.back_layers = back_layers
        self.ir_width = ir
        self.n_classes = n_out
        self.batch_max = min(batch_max, wire.MAX_BATCH)
        self._shutdown = threading.Event()

    # -- session state machine -------------------------------------------

    def handle_session(self, stream: FrameStream) -> None:
        """Run one session to completion; never raises."""
        state = "expect_hello"
        tape = None
        logits = None
        try:
            while True:
                try:
                    frame = stream.recv()
                except TransportClosed:
                    return
                except wire.FrameError as exc:
                    if "64 MiB" in str(exc):
                        return  # oversized payload: close without a reply
                    self._error(stream, f"frame: {exc}")
                    return

                try:
                    if frame.msg_type == wire.HELLO:
                        if state != "expect_hello":
                            self._abort(stream, "protocol: duplicate hello")
                        self._check_hello(stream, frame.payload)
                        state = "ready"
                    elif frame.msg_type == wire.FORWARD:
                        if state != "ready":
                            self._abort(stream, "protocol: forward out of order")
                        ir = self._decode_ir(stream, frame.payload)
                        logits, tape = forward(self.back_layers, ir)
                        stream.send(wire.LOGITS, wire.encode_tensor(logits))
                        state = "awaiting_loss"
                    elif frame.msg_type == wire.LOSS:
                        if state != "awaiting_loss" or tape is None:
                            self._abort(stream, "protocol: loss without forward")
                        loss_value, grad = wire.decode_loss(frame.payload)
                        if grad.shape != logits.shape:
                            self._abort(
                                stream,
                                f"dimension: loss grad shape {grad.shape} does not "
                                f"match logits shape {logits.shape}")
                        log.debug("session loss %.6f", loss_value)
                        _, ir_grad = backward(self.back_layers, tape, grad)
                        stream.send(wire.GRAD, wire.encode_tensor(ir_grad))
                        tape = None
                        state = "ready"
                    elif frame.msg_type == wire.INFER:
                        if state != "ready":
                            self._abort(stream, "protocol: infer out of order")
                        ir = self._decode_ir(stream, frame.payload)
                        probs, _ = forward(self.back_layers, ir)
                        classes = probs.argmax(axis=1)
                        stream.send(wire.PREDICTION, wire.encode_prediction(classes))
                    else:
                        self._abort(stream, f"protocol: unexpected message 0x{frame.msg_type:02x}")
                except _SessionAbort:
                    return
                except FrameError as exc:
                    self._error(stream, f"frame: {exc}")
                    return
                except TransportClosed:
                    return
                except Exception as exc:  # defensive: a session must not crash the server
                    log.exception("session failed")
                    self._error(stream, f"internal: {exc}")
                    return
        finally:
            stream.close()

    def _error(self, stream: FrameStream, text: str) -> None:
        try:
            stream.send(wire.ERROR, wire.encode_error(text))
        except TransportClosed:
            pass

    def _abort(self, stream: FrameStream, text: str) -> None:
        self._error(stream, text)
        raise _SessionAbort

    def _check_hello(self, stream: FrameStream, payload: bytes) -> None:
        ir_width, n_classes, batch_max = wire.decode_hello(payload)
        if ir_width != self.ir_width:
            self._abort(stream, f"dimension: expected ir width {self.ir_width}, got {ir_width}")
        if n_classes != self.n_classes:
            self._abort(stream, f"dimension: expected {self.n_classes} classes, got {n_classes}")
        if not 1 <= batch_max <= self.batch_max:
            self._abort(stream, f"dimension: batch_max {batch_max} outside 1..{self.batch_max}")

    def _decode_ir(self, stream: FrameStream, payload: bytes) -> np.ndarray:
        try:
            ir, offset = wire.decode_tensor(payload)
        except FrameError as exc:
            self._abort(stream, f"frame: {exc}")
        if offset != len(payload):
            self._abort(stream, "frame: trailing bytes after tensor")
        if ir.ndim != 2:
            self._abort(stream, f"dimension: expected a rank-2 tensor, got rank {ir.ndim}")
        if ir.shape[1] != self.ir_width:
            self._abort(stream, f"dimension: expected ir width {self.ir_width}, got {ir.shape[1]}")
        if not 1 <= ir.shape[0] <= self.batch_max:
            self._abort(stream, f"dimension: batch {ir.shape[0]} outside 1..{self.batch_max}")
        if not np.isfinite(ir).all():
            self._abort(stream, "frame: non-finite values in tensor")
        return ir

    # -- listeners ---------------------------------------------------------

    def serve_forever(self, listener: socket.socket) -> None:
        """Accept connections until shutdown() is called; thread per session."""
        listener.settimeout(0.2)
        workers: list[threading.Thread] = []
        try:
            while not self._shutdown.is_set():
                try:
                    conn, addr = listener.accept()
                except socket.timeout:
                    continue
                except OSError:
                    break
                log.info("session from %s", addr)
                worker = threading.Thread(
                    target=self.handle_session, args=(FrameStream(conn),), daemon=True
                )
                worker.start()
                workers.append(worker)
        finally:
            for worker in workers:
                worker.join(timeout=5.0)

    def shutdown(self) -> None:
        self._shutdown.set()


def serve_tcp(server: EdgeServer, host: str, port: int) -> tuple[socket.socket, threading.Thread]:
    """Bind, listen, and run the accept loop in a daemon thread."""
    listener = socket.create_server((host, port))
    thread = threading.Thread(target=server.serve_forever, args=(listener,), daemon=True)
    thread.start()
    return listener, thread


def spawn_loopback(back_layers: list[Layer],
                   batch_max: int = wire.MAX_BATCH) -> tuple[FrameStream, threading.Thread]:
    """One in-process session over a socketpair; returns the device-side stream."""
    server = EdgeServer(back_layers, batch_max=batch_max)
    device_side, edge_side = wire.loopback_pair()
    thread = threading.Thread(target=server.handle_session, args=(edge_side,), daemon=True)
    thread.start()
    return device_side, thread
