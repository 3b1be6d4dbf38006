"""Private transformation pipeline, budget formula, and empirical verifiers."""

import math
import warnings

import mpmath
import numpy as np
import pytest

from helpers import max_rel_error
from roulette.dp import (
    DegenerateXiWarning,
    DpConfig,
    PrivacyReceipt,
    budget,
    clip_inf,
    clipped_laplace_mechanism,
    dp_forward,
    dp_transform,
    estimate_xi,
    nullify,
    sample_laplace,
    verify_dp_nullified,
    verify_dp_scalar,
)
from roulette.errors import InsufficientSamples, InvalidScale
from roulette.tensor import Affine, Relu, forward, glorot_affine

mpmath.mp.dps = 50


class TestLaplaceSampler:
    def test_moments(self):
        rng = np.random.default_rng(0)
        samples = sample_laplace(1.0, 10 ** 6, rng)
        assert 1.96 <= samples.var() <= 2.04  # true variance 2 b^2
        assert abs(np.median(samples)) <= 0.01

    def test_median_absolute_identity(self):
        # P(|X| <= b ln 2) = 0.5 for Laplace(0, b).
        rng = np.random.default_rng(1)
        samples = sample_laplace(1.0, 10 ** 6, rng)
        frac = np.mean(np.abs(samples) <= math.log(2.0))
        assert abs(frac - 0.5) <= 0.005

    def test_invalid_scale(self):
        with pytest.raises(InvalidScale):
            sample_laplace(0.0, 4, np.random.default_rng(0))


class TestNullify:
    def test_eta_zero_bitwise(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((10, 7))
        out, mask = nullify(x, 0.0, rng)
        assert np.array_equal(out, x)
        assert mask.zero_count == 0

    def test_eta_one_zeros(self):
        rng = np.random.default_rng(3)
        out, mask = nullify(rng.standard_normal((5, 4)), 1.0, rng)
        assert np.all(out == 0.0)
        assert mask.zero_count == 20

    def test_zero_count_binomial(self):
        rng = np.random.default_rng(4)
        x = np.ones((100, 1000))  # 1e5 elements
        _, mask = nullify(x, 0.3, rng)
        sigma3 = 3 * math.sqrt(1e5 * 0.3 * 0.7)
        assert abs(mask.zero_count - 30_000) <= max(sigma3, 450)

    def test_mask_is_binary(self):
        rng = np.random.default_rng(5)
        _, mask = nullify(rng.standard_normal((8, 8)), 0.4, rng)
        assert set(np.unique(mask.mask)) <= {0.0, 1.0}


class TestClip:
    def test_below_bound_unchanged(self):
        x = np.array([[0.5, -1.0]])
        assert np.array_equal(clip_inf(x, 2.0), x)

    def test_direct_example(self):
        assert np.array_equal(clip_inf(np.array([3.0, -6.0]), 2.0), [1.0, -2.0])

    def test_zero_passthrough(self):
        assert np.array_equal(clip_inf(np.zeros((3, 4)), 1.0), np.zeros((3, 4)))

    def test_rowwise_fuzz_norm_bounded(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            x = rng.standard_normal((50, 11)) * rng.uniform(0.1, 50)
            bound = rng.uniform(0.1, 5.0)
            out = clip_inf(x, bound)
            assert np.abs(out).max() <= bound * (1 + 1e-12)


class TestEstimateXi:
    def test_identity(self):
        assert estimate_xi([], np.ones((2, 3))) == 1.0

    def test_scalar_gain(self):
        gain = Affine(np.array([[-2.5]]), np.zeros(1), trainable=False)
        assert estimate_xi([gain], np.ones((1, 1))) == 2.5

    def test_matches_finite_difference_jacobian(self):
        rng = np.random.default_rng(7)
        layers = [glorot_affine(5, 6, rng), Relu(), glorot_affine(6, 4, rng)]
        x = rng.standard_normal((3, 5))
        xi = estimate_xi(layers, x)
        h = 1e-6
        worst = 0.0
        for s in range(3):
            for j in range(5):
                bumped = x.copy()
                bumped[s, j] += h
                hi, _ = forward(layers, bumped[s:s + 1])
                bumped[s, j] -= 2 * h
                lo, _ = forward(layers, bumped[s:s + 1])
                worst = max(worst, float(np.abs((hi - lo) / (2 * h)).max()))
        assert max_rel_error(np.array(xi), np.array(worst)) < 1e-4

    def test_matrix_norm_variant_at_least_max_entry(self):
        rng = np.random.default_rng(8)
        layers = [glorot_affine(4, 3, rng)]
        x = rng.standard_normal((2, 4))
        assert estimate_xi(layers, x, matrix_norm=True) >= estimate_xi(layers, x)


class TestBudget:
    def test_endpoints_exact(self):
        assert budget(2.0, 0.0, 1.0) == 2.0
        assert budget(3.7, 0.0, 2.0) == 3.7 / 2.0
        assert budget(5.0, 1.0, 0.3) == 0.0

    def test_reference_value(self):
        want = float(mpmath.log(mpmath.mpf("0.9") * mpmath.e + mpmath.mpf("0.1")))
        assert abs(budget(1.0, 0.1, 1.0) - want) < 1e-14
        assert abs(want - 0.9347017) < 5e-7

    def test_high_precision_grid(self):
        count = 0
        for eps in (0.5, 1.0, 2.0, 5.0, 10.0):
            for eta in (0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0):
                for xi in (0.5, 1.0, 2.0, 4.0):
                    got = budget(eps, eta, xi)
                    want = float(mpmath.log(
                        (1 - mpmath.mpf(eta)) * mpmath.e ** (mpmath.mpf(eps) / mpmath.mpf(xi))
                        + mpmath.mpf(eta)))
                    assert abs(got - want) <= 1e-12 * max(1.0, abs(want))
                    count += 1
        assert count >= 100

    def test_monotonicity_grid(self):
        epsilons = np.linspace(0.2, 6.0, 8)
        etas = np.linspace(0.0, 1.0, 9)
        xis = np.linspace(0.3, 4.0, 7)
        for eta in etas:
            for xi in xis:
                values = [budget(e, eta, xi) for e in epsilons]
                assert all(a <= b + 1e-15 for a, b in zip(values, values[1:]))
        for eps in epsilons:
            for xi in xis:
                values = [budget(eps, eta, xi) for eta in etas]
                assert all(a >= b - 1e-15 for a, b in zip(values, values[1:]))
            for eta in etas:
                values = [budget(eps, eta, xi) for xi in xis]
                assert all(a >= b - 1e-15 for a, b in zip(values, values[1:]))

    def test_degenerate_xi_warns_and_returns_zero(self):
        with pytest.warns(DegenerateXiWarning):
            assert budget(1.0, 0.2, 0.0) == 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            budget(1.0, -0.1, 1.0)
        with pytest.raises(ValueError):
            budget(0.0, 0.5, 1.0)


class TestDpTransform:
    def _front(self, rng):
        return [glorot_affine(6, 5, rng), Relu(), glorot_affine(5, 4, rng)]

    def test_degenerate_noise_equals_clipped_forward(self):
        rng = np.random.default_rng(9)
        front = self._front(rng)
        x = rng.uniform(0, 1, (8, 6))
        cfg = DpConfig(bound=0.7, epsilon=math.inf, eta=0.0,
                       noise_layer_index=len(front))
        out, receipt = dp_transform(front, x, cfg, np.random.default_rng(0))
        want = clip_inf(forward(front, x)[0], 0.7)
        assert np.allclose(out, want, atol=1e-9)
        assert receipt.xi == 1.0

    def test_seed_determinism_bitwise(self):
        rng = np.random.default_rng(10)
        front = self._front(rng)
        x = rng.uniform(0, 1, (4, 6))
        cfg = DpConfig(bound=1.0, epsilon=2.0, eta=0.3, noise_layer_index=2)
        out1, r1 = dp_transform(front, x, cfg, np.random.default_rng(77))
        out2, r2 = dp_transform(front, x, cfg, np.random.default_rng(77))
        assert np.array_equal(out1, out2)
        assert r1.epsilon_total == r2.epsilon_total
        out3, _ = dp_transform(front, x, cfg, np.random.default_rng(78))
        assert not np.array_equal(out1, out3)

    def test_clipped_intermediate_bounded_before_noise(self):
        rng = np.random.default_rng(11)
        front = self._front(rng)
        cfg = DpConfig(bound=0.5, epsilon=1.0, eta=0.1, noise_layer_index=2)
        for _ in range(1000):
            x = rng.uniform(0, 1, (2, 6)) * rng.uniform(0.5, 20)
            record = dp_forward(front, x, cfg, rng)
            assert np.abs(record.clipped).max() <= 0.5 * (1 + 1e-12)

    def test_receipt_consistent_and_serializable(self):
        rng = np.random.default_rng(12)
        front = self._front(rng)
        cfg = DpConfig(bound=1.0, epsilon=2.0, eta=0.25, noise_layer_index=2)
        _, receipt = dp_transform(front, rng.uniform(0, 1, (4, 6)), cfg, rng)
        receipt.validate()
        parsed = PrivacyReceipt.from_text(receipt.to_text())
        assert parsed.epsilon_total == receipt.epsilon_total
        assert parsed.calib_hash == receipt.calib_hash
        assert receipt.epsilon_total <= receipt.epsilon / receipt.xi + 1e-12

    def test_noise_scale_convention_switch(self):
        cfg = DpConfig(bound=2.0, epsilon=4.0, eta=0.0, noise_layer_index=0)
        assert cfg.noise_scale == 1.0  # 2B/eps
        tight = DpConfig(bound=2.0, epsilon=4.0, eta=0.0, noise_layer_index=0,
                         sensitivity_factor=1.0)
        assert tight.noise_scale == 0.5  # B/eps


class TestVerifiers:
    def test_constant_function_near_zero(self):
        rng = np.random.default_rng(13)
        eps = verify_dp_scalar(lambda v: 0.7, 1.0, -1.0, 1.0, a=1.0, sigma=1.0,
                               n_samples=10 ** 6, rng=rng)
        assert eps <= 0.05

    def test_pinned_clipped_identity_example(self):
        rng = np.random.default_rng(14)
        f = lambda v: max(-1.0, min(1.0, v))
        eps = verify_dp_scalar(f, 1.0, -1.0, 1.0, a=1.0, sigma=1.0,
                               n_samples=10 ** 6, rng=rng)
        assert eps <= 1.1

    def test_doubling_a_halves_bound(self):
        rng = np.random.default_rng(15)
        f = lambda v: max(-1.0, min(1.0, v))
        eps = verify_dp_scalar(f, 1.0, -1.0, 1.0, a=2.0, sigma=1.0,
                               n_samples=10 ** 6, rng=rng)
        assert eps <= 0.55

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientSamples):
            verify_dp_scalar(lambda v: 0.0, 0.0, 1.0, 1.0, 1.0, 1.0,
                             10 ** 4, np.random.default_rng(0))

    def test_nullified_eta_zero_matches_scalar_bound(self):
        rng = np.random.default_rng(16)
        mech = clipped_laplace_mechanism(
            lambda xs: np.clip(xs.sum(axis=1), -1.0, 1.0), 1.0, 1.0, 1.0)
        eps = verify_dp_nullified(mech, 1.0, -1.0, 0.0, 10 ** 6, rng)
        assert eps <= 1.1

    def test_nullified_eta_one_near_zero(self):
        rng = np.random.default_rng(17)
        mech = clipped_laplace_mechanism(
            lambda xs: np.clip(xs.sum(axis=1), -1.0, 1.0), 1.0, 1.0, 1.0)
        eps = verify_dp_nullified(mech, 1.0, -1.0, 1.0, 10 ** 6, rng)
        assert eps <= 0.05

    def test_nullified_half_eta_closed_form_target(self):
        rng = np.random.default_rng(18)
        mech = clipped_laplace_mechanism(
            lambda xs: np.clip(xs.sum(axis=1), -1.0, 1.0), 1.0, 1.0, 1.0)
        eps = verify_dp_nullified(mech, 1.0, -1.0, 0.5, 10 ** 6, rng)
        assert eps <= math.log(0.5 * math.e + 0.5) + 0.05
