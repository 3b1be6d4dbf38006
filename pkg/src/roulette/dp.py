"""Differentially private representation pipeline and its empirical verifiers.

The device-side transformation is: nullify the input (independent Bernoulli
zeroing per element), run the pre-noise front layers, clip the result to an
infinity-norm ball of radius B, add Laplace noise of scale
sensitivity_factor * B / epsilon, and run the remaining front layers. Each
transformation produces a PrivacyReceipt carrying the composed budget

    epsilon_total = ln((1 - eta) * exp(epsilon / xi) + eta)

where xi is the largest-magnitude Jacobian entry of the post-noise layers,
estimated on the batch being transformed.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateXiWarning,
    DimensionMismatch,
    InsufficientSamples,
    InvalidScale,
)
from .tensor import Array, GradientTape, Layer, as_batch, backward, forward, out_width

DEFAULT_SENSITIVITY_FACTOR = 2.0


@dataclass
class DpConfig:
    """Knobs of the private transformation.

    bound: clipping threshold B (> 0).
    epsilon: Laplace budget parameter (> 0); math.inf disables the noise.
    eta: nullification rate in [0, 1].
    noise_layer_index: how many front layers run before the noise is added;
        the rest of the front runs after it.
    sensitivity_factor: Laplace scale is sensitivity_factor * B / epsilon.
        The default 2.0 matches the clipped sensitivity estimate; 1.0 is the
        tighter variant used in the budget theorem's proof sketch.
    xi_matrix_norm: estimate xi as the induced infinity norm (max absolute
        row sum of the Jacobian) instead of the max absolute entry.
    """

    bound: float
    epsilon: float
    eta: float
    noise_layer_index: int
    sensitivity_factor: float = DEFAULT_SENSITIVITY_FACTOR
    xi_matrix_norm: bool = False

    def __post_init__(self):
        if self.bound <= 0:
            raise InvalidScale(f"bound must be positive, got {self.bound}")
        if self.epsilon <= 0:
            raise InvalidScale(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 <= self.eta <= 1.0:
            raise InvalidScale(f"eta must lie in [0, 1], got {self.eta}")
        if self.noise_layer_index < 0:
            raise InvalidScale("noise_layer_index must be non-negative")

    @classmethod
    def disabled(cls, noise_layer_index: int = 0) -> "DpConfig":
        """No nullification, no noise, clipping too large to bite."""
        return cls(bound=1e308, epsilon=math.inf, eta=0.0,
                   noise_layer_index=noise_layer_index)

    @property
    def noise_scale(self) -> float:
        if math.isinf(self.epsilon):
            return 0.0
        return self.sensitivity_factor * self.bound / self.epsilon


@dataclass
class NullificationMask:
    """Realized Bernoulli keep/drop pattern, one row per sample."""

    mask: Array
    zero_count: int


@dataclass
class PrivacyReceipt:
    """Record of one private transformation, auditable via calib_hash."""

    bound: float
    epsilon: float
    eta: float
    xi: float
    epsilon_total: float
    calib_hash: str

    def validate(self) -> None:
        expected = budget(self.epsilon, self.eta, self.xi) if self.xi > 0 else 0.0
        if not math.isclose(self.epsilon_total, expected, rel_tol=0.0, abs_tol=1e-12):
            raise ValueError(
                f"epsilon_total {self.epsilon_total} inconsistent with fields "
                f"(expected {expected})"
            )

    def to_text(self) -> str:
        return (
            f"B={self.bound!r}\n"
            f"epsilon={self.epsilon!r}\n"
            f"eta={self.eta!r}\n"
            f"xi={self.xi!r}\n"
            f"epsilon_total={self.epsilon_total!r}\n"
            f"calib_hash={self.calib_hash}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "PrivacyReceipt":
        fields = {}
        for line in text.splitlines():
            line = line.strip()
            if line:
                key, _, value = line.partition("=")
                fields[key] = value
        return cls(
            bound=float(fields["B"]),
            epsilon=float(fields["epsilon"]),
            eta=float(fields["eta"]),
            xi=float(fields["xi"]),
            epsilon_total=float(fields["epsilon_total"]),
            calib_hash=fields["calib_hash"],
        )


def sample_laplace(scale: float, shape, rng: np.random.Generator) -> Array:
    """I.i.d. Laplace(0, scale) noise."""
    if scale <= 0:
        raise InvalidScale(f"laplace scale must be positive, got {scale}")
    return rng.laplace(0.0, scale, size=shape)


def nullify(x, eta: float, rng: np.random.Generator) -> tuple[Array, NullificationMask]:
    """Zero each element independently with probability eta."""
    if not 0.0 <= eta <= 1.0:
        raise InvalidScale(f"eta must lie in [0, 1], got {eta}")
    x = as_batch(x)
    if eta == 0.0:
        mask = np.ones_like(x)
    elif eta == 1.0:
        mask = np.zeros_like(x)
    else:
        mask = (rng.random(x.shape) >= eta).astype(np.float64)
    out = x * mask
    return out, NullificationMask(mask=mask, zero_count=int(mask.size - mask.sum()))


def clip_inf(x, bound: float) -> Array:
    """Scale down to infinity norm <= bound: x / max(1, ||x||_inf / bound).

    Rank-2 inputs are clipped row-wise (each row is one sample's
    representation); rank-1 inputs are treated as a single sample.
    """
    if bound <= 0:
        raise InvalidScale(f"bound must be positive, got {bound}")
    arr = np.asarray(x, dtype=np.float64)
    squeeze = arr.ndim == 1
    arr = as_batch(arr)
    norms = np.abs(arr).max(axis=1, keepdims=True)
    scale = np.maximum(1.0, norms / bound)
    out = arr / scale
    return out[0] if squeeze else out


def clip_scales(x: Array, bound: float) -> Array:
    """Per-sample divisor max(1, ||row||_inf / bound) used by clip_inf."""
    norms = np.abs(x).max(axis=1, keepdims=True)
    return np.maximum(1.0, norms / bound)


def estimate_xi(f2_layers: list[Layer], x_r, matrix_norm: bool = False) -> float:
    """Magnitude of the post-noise sub-network's Jacobian at x_r.

    Default is the maximum absolute Jacobian entry over the batch; with
    matrix_norm=True the induced infinity norm (max absolute row sum) is
    used instead. Computed by one reverse-mode pass per output coordinate.
    """
    x_r = as_batch(x_r)
    if not f2_layers:
        return 1.0
    out, tape = forward(f2_layers, x_r)
    o = out.shape[1]
    worst = 0.0
    for k in range(o):
        upstream = np.zeros_like(out)
        upstream[:, k] = 1.0
        _, input_grad = backward(f2_layers, tape, upstream)
        if matrix_norm:
            worst = max(worst, float(np.abs(input_grad).sum(axis=1).max()))
        else:
            worst = max(worst, float(np.abs(input_grad).max()))
    return worst


def budget(epsilon: float, eta: float, xi: float) -> float:
    """Composed privacy budget ln((1 - eta) * exp(epsilon / xi) + eta).

    Endpoints are exact: eta=0 gives epsilon/xi, eta=1 gives 0. xi=0 means
    the post-noise layers are locally constant; the budget is reported as 0
    with a DegenerateXiWarning.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if xi < 0:
        raise ValueError(f"xi must be non-negative, got {xi}")
    if xi == 0.0:
        warnings.warn(
            "xi = 0: post-noise layers are locally constant, budget reported as 0",
            DegenerateXiWarning,
        )
        return 0.0
    if eta == 1.0:
        return 0.0
    base = epsilon / xi
    if eta == 0.0:
        return base
    if math.isinf(base):
        return math.inf
    # ln((1-eta) e^b + eta) = b + log1p(eta * expm1(-b)), stable for large b.
    return base + math.log1p(eta * math.expm1(-base))


@dataclass
class DpForward:
    """Everything the device must retain to backpropagate through one
    private transformation."""

    output: Array
    receipt: PrivacyReceipt
    mask: NullificationMask
    pre_tape: GradientTape
    post_tape: GradientTape | None
    clip_scale: Array
    clipped: Array
    config: DpConfig


def _batch_digest(x: Array) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, dtype="<f8").tobytes()).hexdigest()


def dp_forward(front_layers: list[Layer], x_l, cfg: DpConfig,
               rng: np.random.Generator) -> DpForward:
    """Run the full private transformation, keeping tapes for backward."""
    x_l = as_batch(x_l)
    k = cfg.noise_layer_index
    if k > len(front_layers):
        raise DimensionMismatch(
            f"noise_layer_index {k} exceeds front depth {len(front_layers)}"
        )
    pre_layers = front_layers[:k] if k else []
    post_layers = front_layers[k:]

    masked, mask = nullify(x_l, cfg.eta, rng)
    if pre_layers:
        x_r, pre_tape = forward(pre_layers, masked)
    else:
        x_r, pre_tape = masked, GradientTape(inputs=[], output=masked, versions=[])
    scale = clip_scales(x_r, cfg.bound)
    clipped = x_r / scale
    noise_scale = cfg.noise_scale
    if noise_scale > 0.0:
        noisy = clipped + sample_laplace(noise_scale, clipped.shape, rng)
    else:
        noisy = clipped
    if post_layers:
        output, post_tape = forward(post_layers, noisy)
    else:
        output, post_tape = noisy, None

    xi = estimate_xi(post_layers, clipped, matrix_norm=cfg.xi_matrix_norm)
    epsilon_total = budget(cfg.epsilon, cfg.eta, xi) if xi > 0 else 0.0
    receipt = PrivacyReceipt(
        bound=cfg.bound,
        epsilon=cfg.epsilon,
        eta=cfg.eta,
        xi=xi,
        epsilon_total=epsilon_total,
        calib_hash=_batch_digest(clipped),
    )
    return DpForward(output=output, receipt=receipt, mask=mask,
                     pre_tape=pre_tape, post_tape=post_tape,
                     clip_scale=scale, clipped=clipped, config=cfg)


def dp_transform(front_layers: list[Layer], x_l, cfg: DpConfig,
                 rng: np.random.Generator) -> tuple[Array, PrivacyReceipt]:
    """Private transformation of a batch; returns the noisy representation
    and its receipt."""
    record = dp_forward(front_layers, x_l, cfg, rng)
    return record.output, record.receipt


def dp_backward(front_layers: list[Layer], record: DpForward,
                upstream_grad) -> tuple[list, Array]:
    """Chain a gradient w.r.t. the transformation output back to the front
    parameters and the raw input.

    The clip is treated as the per-sample constant scaling fixed during the
    forward pass; the additive noise has identity Jacobian.
    """
    k = record.config.noise_layer_index
    pre_layers = front_layers[:k] if k else []
    post_layers = front_layers[k:]
    upstream = as_batch(upstream_grad)

    if post_layers:
        post_grads, grad = backward(post_layers, record.post_tape, upstream)
    else:
        post_grads, grad = [], upstream
    grad = grad / record.clip_scale
    if pre_layers:
        pre_grads, grad = backward(pre_layers, record.pre_tape, grad)
    else:
        pre_grads = []
    input_grad = grad * record.mask.mask
    return list(pre_grads) + list(post_grads), input_grad


def solve_epsilon(target_total: float, eta: float, xi: float) -> float:
    """Epsilon such that budget(epsilon, eta, xi) == target_total."""
    if not 0.0 <= eta < 1.0:
        raise ValueError(f"eta must lie in [0, 1), got {eta}")
    if target_total <= 0 or xi <= 0:
        raise ValueError("target budget and xi must be positive")
    return xi * math.log((math.exp(target_total) - eta) / (1.0 - eta))


def calibrate_config(front_layers: list[Layer], x, *, noise_layer_index: int,
                     eta: float, target_total: float = 1.0,
                     bound_quantile: float = 0.9,
                     sensitivity_factor: float = DEFAULT_SENSITIVITY_FACTOR) -> DpConfig:
    """Pick (bound, epsilon) from a calibration batch so the configured
    budget lands at target_total.

    The clip bound is a quantile of the pre-noise representation's row
    infinity norms; epsilon solves the budget equation at the gain measured
    on the clipped batch.
    """
    x = as_batch(x)
    k = noise_layer_index
    pre = forward(front_layers[:k], x)[0] if k else x
    bound = float(np.quantile(np.abs(pre).max(axis=1), bound_quantile))
    if bound <= 0:
        raise InvalidScale("calibration batch has an all-zero representation")
    xi = estimate_xi(front_layers[k:], pre / clip_scales(pre, bound))
    if xi <= 0:
        raise InvalidScale("post-noise layers are locally constant on this batch")
    epsilon = solve_epsilon(target_total, eta, xi)
    return DpConfig(bound=bound, epsilon=epsilon, eta=eta,
                    noise_layer_index=k, sensitivity_factor=sensitivity_factor)


def design_noise_cut(front_layers: list[Layer], x, *, noise_layer_index: int,
                     eta: float, target_total: float = 1.0,
                     noise_to_bound: float = 0.3,
                     bound_quantile: float = 0.9) -> DpConfig:
    """Rebalance the gain around the noise cut, then calibrate.

    The Laplace scale implied by a budget target depends on the gain of the
    post-noise layers, and that gain can be set freely: shrinking the
    representation at the cut while growing the next affine leaves the
    network function unchanged (see model.rebalance_gain). This sets the
    gain so the noise scale lands at noise_to_bound * bound for the target
    budget, then calibrates (bound, epsilon) on the batch. Mutates
    front_layers in place.
    """
    from .model import rebalance_gain

    if not 0 < noise_layer_index < len(front_layers):
        raise DimensionMismatch("the noise cut must be inside the front partition")
    if noise_to_bound <= 0:
        raise InvalidScale("noise_to_bound must be positive")
    x = as_batch(x)
    k = noise_layer_index
    per_unit = math.log((math.exp(target_total) - eta) / (1.0 - eta))
    pre = forward(front_layers[:k], x)[0]
    bound0 = float(np.quantile(np.abs(pre).max(axis=1), bound_quantile))
    xi0 = estimate_xi(front_layers[k:], pre / clip_scales(pre, bound0))
    if xi0 <= 0:
        raise InvalidScale("post-noise layers are locally constant on this batch")
    xi_design = DEFAULT_SENSITIVITY_FACTOR / (noise_to_bound * per_unit)
    rebalance_gain(front_layers, k, xi_design / xi0)
    return calibrate_config(front_layers, x, noise_layer_index=k, eta=eta,
                            target_total=target_total,
                            bound_quantile=bound_quantile)


# ---------------------------------------------------------------------------
# Monte-Carlo verifiers for the two budget lemmas.

HISTOGRAM_BINS = 201
MIN_BIN_COUNT = 100
MIN_SAMPLES = 100_000
# Sampling allowance subtracted from each bin's log-ratio. Without it, bins
# sitting near the count floor add up to +-0.3 of Poisson noise to the max
# and the estimate overshoots the analytic bound even when the mechanism is
# exactly at it.
RATIO_NOISE_SIGMAS = 3.0


def _histogram_eps(samples_a: Array, samples_b: Array,
                   bins: int, min_count: int) -> float:
    lo = min(samples_a.min(), samples_b.min())
    hi = max(samples_a.max(), samples_b.max())
    edges = np.linspace(lo, hi, bins + 1)
    count_a, _ = np.histogram(samples_a, bins=edges)
    count_b, _ = np.histogram(samples_b, bins=edges)
    usable = (count_a >= min_count) & (count_b >= min_count)
    if not usable.any():
        return 0.0
    ca = count_a[usable].astype(np.float64)
    cb = count_b[usable].astype(np.float64)
    ratios = np.abs(np.log(ca / cb))
    allowance = RATIO_NOISE_SIGMAS * np.sqrt(1.0 / ca + 1.0 / cb)
    return float(np.maximum(ratios - allowance, 0.0).max())


def verify_dp_scalar(f, x, x_prime, bound: float, a: float, sigma: float,
                     n_samples: int, rng: np.random.Generator,
                     bins: int = HISTOGRAM_BINS,
                     min_count: int = MIN_BIN_COUNT) -> float:
    """Empirical budget of the mechanism f(.) + a * Lap(2 * bound / sigma).

    Histograms the mechanism under the two neighboring inputs over shared
    bins and returns the largest absolute log count-ratio among bins with at
    least min_count hits on both sides. The analytic bound is sigma / a.
    """
    if n_samples < MIN_SAMPLES:
        raise InsufficientSamples(f"need at least {MIN_SAMPLES} samples")
    fx, fx_prime = float(f(x)), float(f(x_prime))
    if abs(fx) > bound + 1e-9 or abs(fx_prime) > bound + 1e-9:
        raise InvalidScale("f exceeds its declared bound at the test inputs")
    scale = 2.0 * bound / sigma
    samples_a = fx + a * rng.laplace(0.0, scale, size=n_samples)
    samples_b = fx_prime + a * rng.laplace(0.0, scale, size=n_samples)
    return _histogram_eps(samples_a, samples_b, bins, min_count)


def verify_dp_nullified(mechanism, x, x_prime, eta: float, n_samples: int,
                        rng: np.random.Generator,
                        bins: int = HISTOGRAM_BINS,
                        min_count: int = MIN_BIN_COUNT) -> float:
    """Empirical budget of the composed mechanism input-nullify-then-mechanism.

    `mechanism(inputs, rng)` must map a (n, p) batch of already-masked inputs
    to n scalar samples and be epsilon-DP on its own. Each sample draws an
    independent Bernoulli(eta) mask. For a base budget epsilon the composed
    bound is ln((1 - eta) * exp(epsilon) + eta).
    """
    if n_samples < MIN_SAMPLES:
        raise InsufficientSamples(f"need at least {MIN_SAMPLES} samples")
    if not 0.0 <= eta <= 1.0:
        raise InvalidScale(f"eta must lie in [0, 1], got {eta}")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    x_prime = np.atleast_1d(np.asarray(x_prime, dtype=np.float64))
    if x.shape != x_prime.shape:
        raise DimensionMismatch("neighboring inputs must share a shape")

    def draw(point: Array) -> Array:
        tiled = np.tile(point, (n_samples, 1))
        if eta > 0.0:
            keep = rng.random(tiled.shape) >= eta
            tiled = tiled * keep
        return np.asarray(mechanism(tiled, rng), dtype=np.float64)

    samples_a = draw(x)
    samples_b = draw(x_prime)
    return _histogram_eps(samples_a, samples_b, bins, min_count)


def clipped_laplace_mechanism(f, bound: float, a: float, sigma: float):
    """Vectorized mechanism clip(f(x), bound) + a * Lap(2 * bound / sigma).

    `f` maps a (n, p) batch to n scalars. The result is (sigma/a)-DP, the
    base mechanism for the nullified verifier.
    """
    scale = 2.0 * bound / sigma

    def mechanism(inputs: Array, rng: np.random.Generator) -> Array:
        values = np.clip(np.asarray(f(inputs), dtype=np.float64), -bound, bound)
        return values + a * rng.laplace(0.0, scale, size=values.shape)

    return mechanism
