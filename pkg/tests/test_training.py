"""Loss functions, adversarial direction checks, and the hybrid loop."""

import math

import numpy as np
import pytest

from helpers import desk_encrypted_run, seam_free_layers
from roulette.data import gen_blobs
from roulette.device import DeviceSession, infer_roundtrip
from roulette.dp import DpConfig
from roulette.edge import spawn_loopback
from roulette.errors import NonFinite
from roulette.keygen import DerangementKey, Permutation, key_gen
from roulette.model import SplitModel, dump_layers, make_mlp, model_digest
from roulette.tensor import Softmax, backward, forward, sgd_step
from roulette.training import (
    Discriminator,
    PretrainConfig,
    TrainConfig,
    _disc_objective_grads,
    _scale_grads,
    _sum_grads,
    accuracy,
    hybrid_train,
    loss_class,
    loss_class_grad,
    loss_dist_value,
    pretrain_backbone,
)


class TestLossClass:
    def test_uniform_probs_give_log_n(self):
        for n in (2, 3, 7):
            probs = np.full((5, n), 1.0 / n)
            labels = np.arange(5) % n
            key = key_gen(n, np.random.default_rng(0))
            assert abs(loss_class(probs, labels, key) - math.log(n)) < 1e-12

    def test_hand_example(self):
        key = DerangementKey.from_mapping([1, 0])
        value = loss_class(np.array([[0.8, 0.2]]), np.array([0]), key)
        assert abs(value - (-math.log(0.2))) < 1e-12

    def test_identity_key_is_plain_cross_entropy(self):
        rng = np.random.default_rng(1)
        ident = Permutation.identity(4)
        for _ in range(100):
            probs, _ = forward([Softmax()], rng.standard_normal((6, 4)))
            labels = rng.integers(0, 4, size=6)
            reference = -np.mean(np.log(probs[np.arange(6), labels]))
            assert abs(loss_class(probs, labels, ident) - reference) < 1e-12

    def test_gradient_matches_softmax_closed_form(self):
        # d loss_class / d logits == (softmax(u) - onehot(key(y))) / M.
        rng = np.random.default_rng(2)
        key = key_gen(5, rng)
        for _ in range(20):
            logits = rng.standard_normal((7, 5))
            labels = rng.integers(0, 5, size=7)
            probs, tape = forward([Softmax()], logits)
            _, grad = backward([Softmax()], tape,
                               loss_class_grad(probs, labels, key))
            onehot = np.zeros_like(probs)
            onehot[np.arange(7), key.encrypt_labels(labels)] = 1.0
            assert np.allclose(grad, (probs - onehot) / 7, atol=1e-10, rtol=0)


class _StubDisc:
    def __init__(self, real_score, protected_score):
        self.real_score = real_score
        self.protected_score = protected_score
        self.calls = 0

    def scores(self, z):
        self.calls += 1
        value = self.real_score if self.calls % 2 == 1 else self.protected_score
        return np.full(len(z), value), None


class TestLossDist:
    def test_coin_flip_scores_minus_log_two(self):
        disc = _StubDisc(0.5, 0.5)
        value = loss_dist_value(disc, np.zeros((4, 3)), np.ones((4, 3)))
        assert abs(value - (-math.log(2))) < 1e-12

    def test_perfect_discriminator_approaches_zero(self):
        disc = _StubDisc(1.0, 0.0)  # clamped internally to (0, 1)
        value = loss_dist_value(disc, np.zeros((4, 3)), np.ones((4, 3)))
        assert -1e-11 < value <= 0.0

    def test_hand_example(self):
        disc = _StubDisc(0.9, 0.1)
        value = loss_dist_value(disc, np.zeros((1, 3)), np.ones((1, 3)))
        want = (math.log(0.9) + math.log(0.9)) / 2
        assert abs(value - want) < 1e-12

    def test_real_discriminator_outputs_open_interval(self):
        rng = np.random.default_rng(3)
        disc = Discriminator(6, 8, rng)
        scores, _ = disc.scores(rng.standard_normal((50, 6)) * 100)
        assert np.all(scores > 0.0) and np.all(scores < 1.0)


class TestAdversarialDirections:
    def test_pi_step_increases_v_and_theta_step_decreases_objective(self):
        # 50 random batches: one discriminator ascent raises V; one front
        # descent lowers loss_class + dist_weight * V, with DP off.
        lam = 1.0
        for seed in range(50):
            rng = np.random.default_rng(1000 + seed)
            layers = make_mlp([6, 10, 8, 3], rng)
            model = SplitModel.partition(layers, 3)
            disc = Discriminator(model.ir_width, 8, rng)
            x = rng.uniform(0, 1, (16, 6))
            labels = rng.integers(0, 3, size=16)
            key = DerangementKey.from_mapping([1, 2, 0])
            dp_off = DpConfig.disabled(noise_layer_index=1)

            stream, worker = spawn_loopback(model.back)
            session = DeviceSession(stream, model.front, 3)
            session.hello()
            try:
                real_ir, _ = forward(model.frozen_original_front, x)
                probs = session.forward(x, dp_off, rng)
                protected = session.protected_output

                v_before, disc_grads, _ = _disc_objective_grads(disc, real_ir, protected)
                sgd_step(disc.layers, _scale_grads(disc_grads, -1.0), 1e-2)
                v_after, _, prot_grad = _disc_objective_grads(disc, real_ir, protected)
                assert v_after > v_before

                objective_before = (loss_class(probs, labels, key)
                                    + lam * v_after)
                dist_grads, _ = session.chain_front_grad(lam * prot_grad)
                class_grads, _ = session.backward(
                    loss_class(probs, labels, key),
                    loss_class_grad(probs, labels, key))
                sgd_step(model.front, _sum_grads(class_grads, dist_grads), 1e-3)

                probs2 = session.forward(x, dp_off, rng)
                protected2 = session.protected_output
                v2, _, _ = _disc_objective_grads(disc, real_ir, protected2)
                objective_after = loss_class(probs2, labels, key) + lam * v2
                session.backward(0.0, np.zeros_like(probs2))  # close the round
                assert objective_after < objective_before
            finally:
                session.close()
                worker.join(timeout=5.0)


class TestPretrainBackbone:
    def test_blobs_accuracy(self):
        data = gen_blobs(3, 150, 8, 0.05, seed=5)
        model = pretrain_backbone(data, [16, 12], 2, PretrainConfig(epochs=40, seed=5))
        assert accuracy(model.layers, data) >= 0.95

    def test_zero_epochs_roundtrips_bitwise(self):
        data = gen_blobs(2, 10, 4, 0.1, seed=6)
        model = pretrain_backbone(data, [6], 2, PretrainConfig(epochs=0, seed=6))
        from roulette.model import parse_layers

        blob = dump_layers(model.layers)
        assert dump_layers(parse_layers(blob)) == blob

    def test_one_epoch_reduces_loss(self):
        data = gen_blobs(3, 100, 6, 0.1, seed=7)
        ident = Permutation.identity(3)

        def mean_loss(model):
            probs, _ = forward(model.layers, data.inputs)
            return loss_class(probs, data.labels, ident)

        init = pretrain_backbone(data, [12], 2, PretrainConfig(epochs=0, seed=7))
        trained = pretrain_backbone(data, [12], 2, PretrainConfig(epochs=1, seed=7))
        assert mean_loss(trained) < mean_loss(init)


class TestHybridTraining:
    def test_plain_finetune_loss_decreases(self):
        # dist_weight 0, DP off, identity mapping: stock split fine-tuning.
        rng = np.random.default_rng(8)
        data = gen_blobs(3, 100, 8, 0.05, seed=8)
        layers = make_mlp([8, 12, 10, 3], rng)
        model = SplitModel.partition(layers, 3)
        stream, worker = spawn_loopback(model.back)
        session = DeviceSession(stream, model.front, 3, batch_max=512)
        session.hello()
        try:
            cfg = TrainConfig(epochs=5, batch_size=32, lr_front=0.05,
                              dist_weight=0.0, dp=DpConfig.disabled(1), seed=8)
            result = hybrid_train(session, data, Permutation.identity(3), cfg,
                                  model.frozen_original_front)
        finally:
            session.close()
            worker.join(timeout=5.0)
        per_epoch = {}
        for entry in result.log:
            per_epoch.setdefault(entry.epoch, []).append(entry.loss_class)
        means = [float(np.mean(per_epoch[e])) for e in sorted(per_epoch)]
        assert all(b < a for a, b in zip(means, means[1:]))

    def test_log_format(self):
        rng = np.random.default_rng(9)
        data = gen_blobs(2, 40, 6, 0.08, seed=9)
        layers = make_mlp([6, 8, 6, 2], rng)
        model = SplitModel.partition(layers, 3)
        stream, worker = spawn_loopback(model.back)
        session = DeviceSession(stream, model.front, 2, batch_max=128)
        session.hello()
        try:
            cfg = TrainConfig(epochs=1, batch_size=16, lr_front=0.05,
                              dist_weight=1.0, dp=DpConfig.disabled(1), seed=9)
            result = hybrid_train(session, data, DerangementKey.from_mapping([1, 0]),
                                  cfg, model.frozen_original_front)
        finally:
            session.close()
            worker.join(timeout=5.0)
        line = result.log[0].line()
        parts = line.split("\t")
        assert len(parts) == 5
        assert parts[0] == "0" and parts[1] == "0"

    def test_frozen_original_front_stable_across_epochs(self):
        run = desk_encrypted_run(seed=7, epochs=3)
        try:
            digest = model_digest(run.model.frozen_original_front)
            reference = model_digest(run.model.frozen_original_front)
            assert digest == reference
            assert not any(l.trainable for l in run.model.frozen_original_front)
            # Retraining moved the live front away from the frozen copy.
            assert model_digest(run.model.front) != digest
        finally:
            run.close()

    def test_non_finite_aborts(self):
        rng = np.random.default_rng(10)
        data = gen_blobs(3, 60, 6, 0.05, seed=10)
        data.inputs[0, 0] = np.inf  # poisoned sample must abort the loop
        layers = make_mlp([6, 10, 8, 3], rng)
        model = SplitModel.partition(layers, 3)
        stream, worker = spawn_loopback(model.back)
        session = DeviceSession(stream, model.front, 3, batch_max=256)
        session.hello()
        try:
            cfg = TrainConfig(epochs=1, batch_size=60, lr_front=0.05,
                              dist_weight=0.0, dp=DpConfig.disabled(1), seed=10)
            with pytest.raises(NonFinite):
                hybrid_train(session, data, Permutation.identity(3), cfg,
                             model.frozen_original_front)
        finally:
            session.close()
            worker.join(timeout=5.0)


class TestEndToEndEncryption:
    def test_desk_scale_encrypted_accuracy(self):
        # Derangement key, calibrated unit budget, defaults: decrypted
        # held-out accuracy at least 0.90 within 50 epochs.
        run = desk_encrypted_run(seed=7, epochs=50)
        try:
            rng = np.random.default_rng(123)
            decrypted = infer_roundtrip(run.session, run.test.inputs, run.dp,
                                        run.key, rng)
            raw = run.session.infer(run.test.inputs, run.dp, rng)
            dec_acc = float((decrypted == run.test.labels).mean())
            raw_acc = float((raw == run.test.labels).mean())
            assert dec_acc >= 0.90
            # A correctly encrypted prediction is never a raw hit.
            assert dec_acc + raw_acc <= 1.05
            receipt = run.session.last_receipt
            assert receipt is not None and receipt.epsilon_total <= receipt.epsilon
        finally:
            run.close()

    def test_reproducible_checkpoint(self):
        digests = []
        for _ in range(2):
            run = desk_encrypted_run(seed=3, epochs=4)
            try:
                digests.append(model_digest(run.model.layers))
            finally:
                run.close()
        assert digests[0] == digests[1]
