"""Shared test utilities: random nets, finite-difference oracles, CNF generators."""

from __future__ import annotations

import numpy as np

from roulette.reduction import CnfInstance
from roulette.tensor import Affine, Layer, Relu, Softmax, forward, glorot_affine


def random_net(rng: np.random.Generator, max_affine: int = 3,
               max_units: int = 32, softmax: bool = False,
               in_dim: int | None = None, out_dim: int | None = None) -> list[Layer]:
    """Random affine/ReLU stack with at most 4 layers worth of structure."""
    n_affine = int(rng.integers(1, max_affine + 1))
    dims = [in_dim or int(rng.integers(2, max_units + 1))]
    for _ in range(n_affine):
        dims.append(int(rng.integers(2, max_units + 1)))
    if out_dim is not None:
        dims[-1] = out_dim
    layers: list[Layer] = []
    for i in range(n_affine):
        layers.append(glorot_affine(dims[i], dims[i + 1], rng))
        if i < n_affine - 1:
            layers.append(Relu())
    if softmax:
        layers.append(Softmax())
    return layers


def linear_loss(coeffs: np.ndarray):
    """L(y) = sum(coeffs * y); exact upstream gradient is coeffs itself."""

    def loss(y: np.ndarray) -> float:
        return float((coeffs * y).sum())

    return loss


def fd_param_grads(layers: list[Layer], x: np.ndarray, loss,
                   h: float = 1e-5) -> list[tuple[np.ndarray, np.ndarray] | None]:
    """Central finite differences of `loss(forward(layers, x))` w.r.t. params."""
    grads = []
    for layer in layers:
        if not isinstance(layer, Affine):
            grads.append(None)
            continue
        d_w = np.zeros_like(layer.weight)
        for idx in np.ndindex(layer.weight.shape):
            orig = layer.weight[idx]
            layer.weight[idx] = orig + h
            hi = loss(forward(layers, x)[0])
            layer.weight[idx] = orig - h
            lo = loss(forward(layers, x)[0])
            layer.weight[idx] = orig
            d_w[idx] = (hi - lo) / (2 * h)
        d_b = np.zeros_like(layer.bias)
        for idx in np.ndindex(layer.bias.shape):
            orig = layer.bias[idx]
            layer.bias[idx] = orig + h
            hi = loss(forward(layers, x)[0])
            layer.bias[idx] = orig - h
            lo = loss(forward(layers, x)[0])
            layer.bias[idx] = orig
            d_b[idx] = (hi - lo) / (2 * h)
        grads.append((d_w, d_b))
    return grads


def fd_input_grad(layers: list[Layer], x: np.ndarray, loss,
                  h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        hi = loss(forward(layers, x)[0])
        x[idx] = orig - h
        lo = loss(forward(layers, x)[0])
        x[idx] = orig
        grad[idx] = (hi - lo) / (2 * h)
    return grad


def max_rel_error(analytic: np.ndarray, reference: np.ndarray,
                  floor: float = 1e-6) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(reference)), floor)
    return float((np.abs(analytic - reference) / scale).max())


def random_cnf(n_vars: int, n_clauses: int, rng: np.random.Generator,
               max_occurrences: int = 5) -> CnfInstance:
    """Random exact-3 CNF with the per-variable occurrence count capped.

    The cap is relaxed to the feasibility floor ceil(3 m / n) when needed,
    otherwise rejection sampling could never terminate.
    """
    cap = max(max_occurrences, -(-3 * n_clauses // n_vars))
    while True:
        clauses = []
        for _ in range(n_clauses):
            variables = rng.choice(n_vars, size=3, replace=False) + 1
            signs = rng.choice([-1, 1], size=3)
            clauses.append(tuple(int(v * s) for v, s in zip(variables, signs)))
        instance = CnfInstance(n_vars=n_vars, clauses=tuple(clauses))
        if instance.occurrence_bound <= cap:
            return instance


# ---------------------------------------------------------------------------
# Desk-scale encrypted co-inference pipeline shared by training/attack tests.

from dataclasses import dataclass

from roulette.data import LabeledSet, gen_blobs
from roulette.device import DeviceSession, infer_roundtrip
from roulette.dp import DpConfig, design_noise_cut
from roulette.edge import spawn_loopback
from roulette.keygen import DerangementKey, key_gen
from roulette.model import SplitModel
from roulette.tensor import Softmax
from roulette.training import PretrainConfig, TrainConfig, hybrid_train, pretrain_backbone


def seam_free_layers(dims: tuple[int, ...], rng: np.random.Generator) -> list[Layer]:
    """input -> w -> ir | ir -> h -> classes with no ReLU at the split seam,
    so the uploaded representation is a signed pre-activation."""
    d, w, o, h, k = dims
    return [glorot_affine(d, w, rng), Relu(), glorot_affine(w, o, rng),
            glorot_affine(o, h, rng), Relu(), glorot_affine(h, k, rng), Softmax()]


@dataclass
class DeskRun:
    model: SplitModel
    key: DerangementKey
    dp: DpConfig
    train: LabeledSet
    test: LabeledSet
    session: DeviceSession
    worker: object

    def close(self):
        self.session.close()
        self.worker.join(timeout=5.0)


def desk_encrypted_run(seed: int, epochs: int = 120, dist_weight: float = 1.0,
                       eta: float = 0.1, noise_to_bound: float = 0.3,
                       lr: float = 0.05, dims=(24, 64, 64, 24, 3),
                       per_class: int = 300, spread: float = 0.06,
                       target_total: float = 1.0) -> DeskRun:
    """Pretrain, calibrate the private transform for a unit total budget,
    and retrain the front against a frozen back over the loopback protocol."""
    rng = np.random.default_rng(seed)
    full = gen_blobs(3, per_class, dims[0], spread, seed=seed)
    order = rng.permutation(len(full))
    n_train = 2 * len(full) // 3
    train, test = full.subset(order[:n_train]), full.subset(order[n_train:])

    layers = seam_free_layers(dims, np.random.default_rng(seed))
    model = pretrain_backbone(train, layers, 3,
                              PretrainConfig(epochs=30, seed=seed))
    dp_cfg = design_noise_cut(model.front, train.inputs, noise_layer_index=1,
                              eta=eta, target_total=target_total,
                              noise_to_bound=noise_to_bound)
    key = key_gen(3, rng)
    stream, worker = spawn_loopback(model.back)
    session = DeviceSession(stream, model.front, 3, batch_max=1024)
    session.hello()
    cfg = TrainConfig(epochs=epochs, batch_size=32, lr_front=lr, lr_disc=0.05,
                      dist_weight=dist_weight, dp=dp_cfg, seed=seed)
    hybrid_train(session, train, key, cfg, model.frozen_original_front)
    return DeskRun(model=model, key=key, dp=dp_cfg, train=train, test=test,
                   session=session, worker=worker)
