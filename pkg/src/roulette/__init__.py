"""Split-learning co-inference with an encrypting front-end.

A device retrains its front partition against a frozen edge-side back
partition so the uploaded representation classifies to permuted labels,
while a differentially private transformation (nullification, clipping,
Laplace noise) bounds what the representation itself reveals. The package
also ships the matching attack harnesses and a 3SAT-to-ReLU reduction
builder for the hardness claim behind the key space.
"""

__version__ = "0.1.0"

from . import attacks, data, dp, keygen, reduction, tensor, training, wire
from .device import DeviceSession, infer_roundtrip
from .dp import DpConfig, PrivacyReceipt, budget, dp_transform, estimate_xi
from .edge import EdgeServer, spawn_loopback
from .keygen import DerangementKey, Permutation, count_derangements, key_gen
from .model import SplitModel, load_model, make_mlp, save_model
from .training import TrainConfig, hybrid_train, pretrain_backbone

__all__ = [
    "DeviceSession",
    "DerangementKey",
    "DpConfig",
    "EdgeServer",
    "Permutation",
    "PrivacyReceipt",
    "SplitModel",
    "TrainConfig",
    "attacks",
    "budget",
    "count_derangements",
    "data",
    "dp",
    "dp_transform",
    "estimate_xi",
    "hybrid_train",
    "infer_roundtrip",
    "key_gen",
    "keygen",
    "load_model",
    "make_mlp",
    "pretrain_backbone",
    "reduction",
    "save_model",
    "spawn_loopback",
    "tensor",
    "training",
    "wire",
]
