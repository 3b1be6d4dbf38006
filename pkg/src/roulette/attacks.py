"""Adversary harness: model inversion, similarity metrics, shadow models.

Inversion solves argmin_s ||f(s) - z||^2 by gradient descent with a fixed
step and halving-on-increase backtracking. The shadow attack enumerates the
whole candidate key space, retrains one substitute front-end per mapping on
the attacker's data, fits a discrimination network on the substitutes'
protected representations, and scores it on the victim's real traffic.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledSet, batches
from .device import DeviceSession
from .dp import DpConfig, dp_forward
from .edge import spawn_loopback
from .errors import DimensionMismatch, KeySpaceTooLarge, NonFinite
from .keygen import DerangementKey, Permutation, enumerate_derangements
from .model import SplitModel
from .tensor import (
    Array,
    Layer,
    as_batch,
    backward,
    forward,
    glorot_affine,
    sgd_step,
)
from .tensor import Relu, Softmax
from .training import loss_class, loss_class_grad

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Model inversion


@dataclass
class InversionConfig:
    steps: int = 300
    step_size: float = 0.5
    init: str = "zeros"  # "zeros" | "random"
    max_halvings: int = 10

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.init not in ("zeros", "random"):
            raise ValueError(f"unknown init {self.init!r}")


def _objective(layers: list[Layer], s: Array, z: Array) -> tuple[float, Array, object]:
    out, tape = forward(layers, s)
    diff = out - z
    return float((diff * diff).sum()), diff, tape


def invert(layers: list[Layer], z, cfg: InversionConfig,
           rng: np.random.Generator | None = None,
           input_dim: int | None = None) -> Array:
    """Recover inputs whose representation matches z under `layers`.

    Descends the summed squared distance over the batch; a step that would
    increase it is retried at half the size (up to cfg.max_halvings) and the
    iteration stops once no decrease is found. Returns the best iterate.
    """
    z = as_batch(z)
    if input_dim is None:
        from .tensor import in_width

        input_dim = in_width(layers)
        if input_dim is None:
            input_dim = z.shape[1]
    if cfg.init == "zeros":
        s = np.zeros((z.shape[0], input_dim))
    else:
        if rng is None:
            raise ValueError("random init needs an rng")
        s = rng.uniform(0.0, 1.0, size=(z.shape[0], input_dim))

    value, diff, tape = _objective(layers, s, z)
    best_value, best_s = value, s.copy()
    for _ in range(cfg.steps):
        _, grad = backward(layers, tape, 2.0 * diff)
        if not np.isfinite(grad).all():
            raise NonFinite("inversion gradient diverged")
        step = cfg.step_size
        for _ in range(cfg.max_halvings + 1):
            candidate = s - step * grad
            cand_value, cand_diff, cand_tape = _objective(layers, candidate, z)
            if cand_value <= value:
                break
            step *= 0.5
        else:
            break  # no decrease found at the smallest step
        s, value, diff, tape = candidate, cand_value, cand_diff, cand_tape
        if value < best_value:
            best_value, best_s = value, s.copy()
    return best_s


# ---------------------------------------------------------------------------
# Similarity metrics


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape {a.shape} != {b.shape}")
    return float(np.mean((a - b) ** 2))


SSIM_WINDOW = 8
SSIM_C1 = (0.01) ** 2  # dynamic range fixed at 1
SSIM_C2 = (0.03) ** 2


def ssim(a, b) -> float:
    """Mean structural similarity over 8x8 uniform windows, stride 1.

    Inputs are 2-D images with dynamic range 1. Window statistics use
    population normalization (divide by the window size).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape {a.shape} != {b.shape}")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise DimensionMismatch(f"ssim needs 2-D images of at least "
                                f"{SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    mu_a = _window_mean(a)
    mu_b = _window_mean(b)
    ev_aa = _window_mean(a * a)
    ev_bb = _window_mean(b * b)
    ev_ab = _window_mean(a * b)
    var_a = ev_aa - mu_a * mu_a
    var_b = ev_bb - mu_b * mu_b
    cov = ev_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def _window_mean(img: Array) -> Array:
    """Mean of every 8x8 window (stride 1), via a padded integral image."""
    w = SSIM_WINDOW
    integral = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    integral[1:, 1:] = img.cumsum(axis=0).cumsum(axis=1)
    sums = (integral[w:, w:] - integral[:-w, w:]
            - integral[w:, :-w] + integral[:-w, :-w])
    return sums / (w * w)


# ---------------------------------------------------------------------------
# Shadow-model attack


@dataclass
class ShadowAttackConfig:
    """Shadow retraining mirrors the victim's published procedure, including
    the representation-indistinguishability term at `dist_weight`."""

    epochs: int = 15
    batch_size: int = 32
    lr: float = 0.05
    dist_weight: float = 1.0
    disc_hidden: int = 32
    disc_epochs: int = 30
    disc_lr: float = 0.1
    dp: DpConfig = field(default_factory=DpConfig.disabled)
    include_identity: bool = False
    max_classes: int = 4
    seed: int = 0


@dataclass
class ShadowEnsemble:
    candidates: list[Permutation]
    fronts: list[list[Layer]]
    true_index: int


@dataclass
class ShadowAttackResult:
    attack_accuracy: float
    true_index: int
    n_candidates: int


def attack_accuracy(predictions, true_index: int) -> float:
    """Fraction of traffic samples whose mapping the attacker identified.

    For two candidates this equals 1 - mean(true_index XOR prediction); for
    larger candidate sets it is plain top-1 accuracy against the true index.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    return float((predictions == true_index).mean())


def candidate_keys(n_classes: int, include_identity: bool = False) -> list[Permutation]:
    keys: list[Permutation] = list(enumerate_derangements(n_classes))
    if include_identity:
        keys.append(Permutation.identity(n_classes))
    return keys


def _retrain_front(base: SplitModel, data: LabeledSet, key: Permutation,
                   cfg: ShadowAttackConfig, seed: int) -> list[Layer]:
    """Retrain a copy of the pre-trained front under `key` with the same
    hybrid procedure a real device runs, over the loopback protocol."""
    from .training import TrainConfig, hybrid_train

    front = copy.deepcopy(base.frozen_original_front)
    for layer in front:
        layer.trainable = True
    stream, worker = spawn_loopback(base.back)
    session = DeviceSession(stream, front, base.n_classes,
                            batch_max=max(cfg.batch_size, len(data)))
    session.hello()
    try:
        train_cfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                                lr_front=cfg.lr, lr_disc=cfg.lr,
                                dist_weight=cfg.dist_weight, dp=cfg.dp,
                                seed=seed)
        hybrid_train(session, data, key, train_cfg, base.frozen_original_front)
    finally:
        session.close()
        worker.join(timeout=5.0)
    return front


def _softmax_mlp(in_dim: int, hidden: int, out_dim: int,
                 rng: np.random.Generator) -> list[Layer]:
    return [glorot_affine(in_dim, hidden, rng), Relu(),
            glorot_affine(hidden, out_dim, rng), Softmax()]


def shadow_attack(public_data: LabeledSet, base: SplitModel,
                  victim_traffic: Array, true_key: Permutation,
                  cfg: ShadowAttackConfig) -> ShadowAttackResult:
    """Train one shadow per candidate mapping plus a discrimination network,
    then score the network on the victim's protected representations.

    The returned attack accuracy is the fraction of victim samples whose
    mapping the network identifies; for two candidates this is the
    complement of the mean XOR between the true index and the prediction.
    """
    n = base.n_classes
    if n > cfg.max_classes:
        raise KeySpaceTooLarge(
            f"{n} classes means too many candidate mappings (cap {cfg.max_classes})")
    candidates = candidate_keys(n, cfg.include_identity)
    try:
        true_index = [k.forward for k in candidates].index(tuple(true_key.forward))
    except ValueError:
        raise KeySpaceTooLarge("victim key is not in the enumerated candidate space")

    rng = np.random.default_rng(cfg.seed)
    fronts = [_retrain_front(base, public_data, key, cfg, cfg.seed + i)
              for i, key in enumerate(candidates)]
    ensemble = ShadowEnsemble(candidates=candidates, fronts=fronts,
                              true_index=true_index)
    disc = train_discrimination_net(ensemble, public_data, cfg, rng)

    victim_traffic = as_batch(victim_traffic)
    probs, _ = forward(disc, victim_traffic)
    accuracy = attack_accuracy(probs.argmax(axis=1), true_index)
    return ShadowAttackResult(attack_accuracy=accuracy, true_index=true_index,
                              n_candidates=len(candidates))


def train_discrimination_net(ensemble: ShadowEnsemble, data: LabeledSet,
                             cfg: ShadowAttackConfig,
                             rng: np.random.Generator) -> list[Layer]:
    """Classify which candidate mapping produced a protected representation.

    Trained on the shadows' own noisy representations, matching what the
    victim actually uploads; the noise and nullification are redrawn every
    epoch so the network fits mapping signatures rather than one noise
    realization.
    """
    n_shadows = len(ensemble.fronts)
    net = None
    identity = Permutation.identity(n_shadows)
    for _ in range(cfg.disc_epochs):
        samples = []
        targets = []
        for idx, front in enumerate(ensemble.fronts):
            protected = dp_forward(front, data.inputs, cfg.dp, rng).output
            samples.append(protected)
            targets.append(np.full(len(protected), idx, dtype=np.int64))
        train_set = LabeledSet(np.vstack(samples), np.concatenate(targets),
                               n_shadows)
        if net is None:
            net = _softmax_mlp(train_set.dim, cfg.disc_hidden, n_shadows, rng)
        for x, labels in batches(train_set, cfg.batch_size, rng):
            probs, tape = forward(net, x)
            grads, _ = backward(net, tape, loss_class_grad(probs, labels, identity))
            sgd_step(net, grads, cfg.disc_lr)
    return net


# ---------------------------------------------------------------------------
# Report writers


def write_inversion_report(path, sample_mse: list[float],
                           sample_ssim: list[float] | None = None) -> None:
    """Text table: sample_id, mse[, ssim], then summary means."""
    with open(path, "w", encoding="ascii") as fh:
        header = "sample_id\tmse" + ("\tssim" if sample_ssim is not None else "")
        fh.write(header + "\n")
        for i, value in enumerate(sample_mse):
            row = f"{i}\t{value:.6f}"
            if sample_ssim is not None:
                row += f"\t{sample_ssim[i]:.6f}"
            fh.write(row + "\n")
        fh.write(f"mean_mse={np.mean(sample_mse):.6f}\n")
        if sample_ssim is not None:
            fh.write(f"mean_ssim={np.mean(sample_ssim):.6f}\n")
