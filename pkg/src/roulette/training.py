"""Losses and training loops.

Two losses drive the front-end retraining:

  * classification loss on encrypted labels: cross-entropy of the edge's
    probability outputs against key-permuted targets;
  * a representation-indistinguishability term V, the log-likelihood a
    discriminator assigns to "original front-end output" vs "protected
    output". The discriminator ascends V, the front-end descends
    loss_class + dist_weight * V, the usual adversarial min-max.

The hybrid loop drives the split protocol for every classification
forward/backward; only the discriminator math stays purely local.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledSet, batches
from .device import DeviceSession
from .dp import DpConfig, dp_forward
from .errors import IndexOutOfRange, NonFinite
from .keygen import Permutation
from .model import SplitModel, make_mlp
from .tensor import (
    Array,
    Layer,
    ParamGrads,
    Relu,
    as_batch,
    backward,
    forward,
    glorot_affine,
    log_probs,
    sgd_step,
)

log = logging.getLogger(__name__)

SIGMOID_CLAMP = 30.0


def loss_class(probs, labels, key: Permutation) -> float:
    """Mean cross-entropy of probability rows against encrypted labels."""
    probs = as_batch(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise IndexOutOfRange("label outside the probability row width")
    encrypted = key.encrypt_labels(labels)
    picked = probs[np.arange(len(labels)), encrypted]
    return float(-log_probs(picked).mean())


def loss_class_grad(probs, labels, key: Permutation) -> Array:
    """Gradient of loss_class w.r.t. the probability rows (per sample)."""
    probs = as_batch(probs)
    labels = np.asarray(labels, dtype=np.int64)
    encrypted = key.encrypt_labels(labels)
    grad = np.zeros_like(probs)
    m = len(labels)
    picked = np.maximum(probs[np.arange(m), encrypted], 1e-12)
    grad[np.arange(m), encrypted] = -1.0 / (m * picked)
    return grad


class Discriminator:
    """Small MLP scoring a representation as "original" (1) vs "protected" (0).

    The sigmoid head keeps outputs strictly inside (0, 1) by clamping its
    pre-activation.
    """

    def __init__(self, ir_width: int, hidden: int, rng: np.random.Generator):
        self.layers: list[Layer] = [
            glorot_affine(ir_width, hidden, rng),
            Relu(),
            glorot_affine(hidden, 1, rng),
        ]

    def scores(self, z) -> tuple[Array, object]:
        """Probabilities in (0, 1), one per row, plus the tape for backward."""
        pre, tape = forward(self.layers, z)
        clamped = np.clip(pre, -SIGMOID_CLAMP, SIGMOID_CLAMP)
        return 1.0 / (1.0 + np.exp(-clamped)), tape

    def backward_from_preactivation(self, tape, pre_grad) -> tuple[ParamGrads, Array]:
        """Backward pass given d objective / d pre-sigmoid activation."""
        return backward(self.layers, tape, pre_grad)


def loss_dist_value(disc: Discriminator, real_ir, protected_ir) -> float:
    """Log-likelihood V of the discriminator on a real/protected batch.

    V = mean over all rows of [t log D(z) + (1 - t) log(1 - D(z))] with t = 1
    for rows of real_ir and t = 0 for rows of protected_ir. Perfect
    discrimination drives V toward 0 from below; a coin-flip scores -ln 2.
    """
    real_ir = as_batch(real_ir)
    protected_ir = as_batch(protected_ir)
    if real_ir.shape[0] != protected_ir.shape[0]:
        raise IndexOutOfRange("real and protected batches must be the same size")
    d_real, _ = disc.scores(real_ir)
    d_prot, _ = disc.scores(protected_ir)
    d_real = np.clip(d_real, 1e-12, 1.0 - 1e-12)
    d_prot = np.clip(d_prot, 1e-12, 1.0 - 1e-12)
    total = np.log(d_real).sum() + np.log1p(-d_prot).sum()
    return float(total / (len(d_real) + len(d_prot)))


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr_front: float = 0.05
    lr_disc: float = 0.05
    dist_weight: float = 1.0
    discriminator_pretrain_epochs: int = 3
    disc_hidden: int | None = None  # default: IR width
    dp: DpConfig = field(default_factory=DpConfig.disabled)
    seed: int = 0

    def __post_init__(self):
        if self.lr_front <= 0 or self.lr_disc <= 0:
            raise ValueError("learning rates must be positive")
        if self.dist_weight < 0:
            raise ValueError("dist_weight must be non-negative")


@dataclass
class BatchLog:
    epoch: int
    batch: int
    loss_class: float
    dist_value: float
    epsilon_total: float

    def line(self) -> str:
        return (f"{self.epoch}\t{self.batch}\t{self.loss_class:.6f}"
                f"\t{self.dist_value:.6f}\t{self.epsilon_total:.6f}")


@dataclass
class TrainResult:
    front_layers: list[Layer]
    discriminator: Discriminator
    log: list[BatchLog]


def _check_finite_loss(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NonFinite(f"{what} is not finite ({value})")
    return value


def _disc_objective_grads(disc: Discriminator, real_ir: Array, protected_ir: Array):
    """V plus its gradients: ascent direction for the discriminator parameters
    and d V / d protected rows for the front-end chain."""
    m_total = real_ir.shape[0] + protected_ir.shape[0]
    d_real, tape_real = disc.scores(real_ir)
    d_prot, tape_prot = disc.scores(protected_ir)
    v = (np.log(np.clip(d_real, 1e-12, None)).sum()
         + np.log1p(-np.clip(d_prot, None, 1.0 - 1e-12)).sum()) / m_total
    # d V / d pre-activation is (t - D) / m_total for both row groups.
    real_pre_grad = (1.0 - d_real) / m_total
    prot_pre_grad = (0.0 - d_prot) / m_total
    real_grads, _ = disc.backward_from_preactivation(tape_real, real_pre_grad)
    prot_grads, prot_input_grad = disc.backward_from_preactivation(tape_prot, prot_pre_grad)
    param_grads = _sum_grads(real_grads, prot_grads)
    return float(v), param_grads, prot_input_grad


def _sum_grads(a: ParamGrads, b: ParamGrads) -> ParamGrads:
    out: ParamGrads = []
    for ga, gb in zip(a, b):
        if ga is None:
            out.append(None)
        else:
            out.append((ga[0] + gb[0], ga[1] + gb[1]))
    return out


def _scale_grads(grads: ParamGrads, factor: float) -> ParamGrads:
    return [None if g is None else (factor * g[0], factor * g[1]) for g in grads]


def pretrain_discriminator(disc: Discriminator, session: DeviceSession,
                           original_front: list[Layer], dataset: LabeledSet,
                           cfg: TrainConfig, rng: np.random.Generator) -> None:
    """Fit the discriminator on original vs protected representations with
    the front-end held fixed. Purely local: no protocol traffic."""
    for _ in range(cfg.discriminator_pretrain_epochs):
        for x, _labels in batches(dataset, cfg.batch_size, rng):
            real_ir, _ = forward(original_front, x)
            protected = dp_forward(session.front_layers, x, cfg.dp, rng).output
            _, disc_grads, _ = _disc_objective_grads(disc, real_ir, protected)
            sgd_step(disc.layers, _scale_grads(disc_grads, -1.0), cfg.lr_disc)


def hybrid_train(session: DeviceSession, dataset: LabeledSet, key: Permutation,
                 cfg: TrainConfig, original_front: list[Layer],
                 disc: Discriminator | None = None) -> TrainResult:
    """Adversarial retraining of the front-end over the split protocol.

    Per batch: one protocol forward gives the protected representation and
    the edge logits; the discriminator takes one ascent step on V; the
    front-end takes one descent step on loss_class + dist_weight * V, with
    the classification gradient arriving via the protocol's GRAD message and
    the V gradient flowing only through the protected branch.
    """
    rng = np.random.default_rng(cfg.seed)
    ir_width = session.ir_width
    if disc is None:
        disc = Discriminator(ir_width, cfg.disc_hidden or ir_width, rng)
    if cfg.dist_weight > 0:
        pretrain_discriminator(disc, session, original_front, dataset, cfg, rng)

    history: list[BatchLog] = []
    for epoch in range(cfg.epochs):
        for batch_no, (x, labels) in enumerate(batches(dataset, cfg.batch_size, rng)):
            probs = session.forward(x, cfg.dp, rng)
            protected = session.protected_output
            value = _check_finite_loss(loss_class(probs, labels, key), "loss_class")

            dist_value = 0.0
            if cfg.dist_weight > 0:
                real_ir, _ = forward(original_front, x)
                # Discriminator ascent on V.
                _, disc_grads, _ = _disc_objective_grads(disc, real_ir, protected)
                sgd_step(disc.layers, _scale_grads(disc_grads, -1.0), cfg.lr_disc)
                # Front-end sees the updated discriminator.
                dist_value, _, prot_input_grad = _disc_objective_grads(
                    disc, real_ir, protected)
                _check_finite_loss(dist_value, "dist term")
                dist_grads, _ = session.chain_front_grad(
                    cfg.dist_weight * prot_input_grad)
            else:
                dist_grads = None

            class_grads, _ = session.backward(value, loss_class_grad(probs, labels, key))
            total = class_grads if dist_grads is None else _sum_grads(class_grads, dist_grads)
            sgd_step(session.front_layers, total, cfg.lr_front)

            receipt = session.last_receipt
            history.append(BatchLog(epoch, batch_no, value, dist_value,
                                    receipt.epsilon_total if receipt else 0.0))
    return TrainResult(front_layers=session.front_layers, discriminator=disc,
                       log=history)


def write_training_log(path, history: list[BatchLog]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for entry in history:
            fh.write(entry.line() + "\n")


@dataclass
class PretrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.1
    seed: int = 0


def pretrain_backbone(dataset: LabeledSet, architecture, split_index: int,
                      cfg: PretrainConfig) -> SplitModel:
    """Standard cross-entropy training of the full model, then partition.

    `architecture` is either a list of hidden affine widths (expanded to
    input -> hidden... -> n_classes with ReLU between affines and a softmax
    head) or an explicit layer list, which is trained as given.
    """
    rng = np.random.default_rng(cfg.seed)
    if architecture and all(isinstance(w, int) for w in architecture):
        dims = [dataset.dim, *architecture, dataset.n_classes]
        layers = make_mlp(dims, rng)
    else:
        layers = list(architecture)
    identity = Permutation.identity(dataset.n_classes)
    for _ in range(cfg.epochs):
        for x, labels in batches(dataset, cfg.batch_size, rng):
            probs, tape = forward(layers, x)
            value = _check_finite_loss(loss_class(probs, labels, identity), "pretrain loss")
            grads, _ = backward(layers, tape, loss_class_grad(probs, labels, identity))
            sgd_step(layers, grads, cfg.lr)
            log.debug("pretrain loss %.4f", value)
    return SplitModel.partition(layers, split_index)


def accuracy(layers: list[Layer], dataset: LabeledSet) -> float:
    probs, _ = forward(layers, dataset.inputs)
    return float((probs.argmax(axis=1) == dataset.labels).mean())
