"""3-CNF to two-layer ReLU network reduction, with brute-force checkers.

Given a formula with n variables, m clauses, and per-variable occurrence
bound Q, the network has input width p = n, first layer width
m1 = m + 200*Q^2*n, and output width o = m + 100*Q^2*n. Encoding: x_i = -1
means variable i is true, +1 means false. Clause neuron j fires
relu(sum of +-x_i - 2): exactly 0 on 3-literal clauses that are satisfied
and 1 otherwise. The remaining first-layer neurons compute relu(x_i) and
relu(-x_i); the output layer sums each such pair into |x_i|, repeated
100*Q^2 times per variable. The target output is m zeros followed by ones,
so a binary encoding hits the target exactly when the assignment satisfies
every clause, and in general its squared distance to the target counts the
unsatisfied clauses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParseError, TooLarge
from .tensor import Affine, Array, Relu, forward

MAX_VARS = 12
MAX_CLAUSES = 20
COPY_FACTOR = 100  # copies per variable are COPY_FACTOR * Q^2


@dataclass(frozen=True)
class CnfInstance:
    n_vars: int
    clauses: tuple[tuple[int, ...], ...]

    @property
    def n_clauses(self) -> int:
        return len(self.clauses)

    @property
    def occurrence_bound(self) -> int:
        """Q: the largest number of clauses any single variable appears in."""
        counts = [0] * (self.n_vars + 1)
        for clause in self.clauses:
            for lit in clause:
                counts[abs(lit)] += 1
        return max(counts[1:], default=0)

    def unsatisfied_count(self, assignment) -> int:
        """Clauses left false by a boolean assignment (True = variable true)."""
        unsat = 0
        for clause in self.clauses:
            if not any((assignment[abs(lit) - 1] if lit > 0
                        else not assignment[abs(lit) - 1]) for lit in clause):
                unsat += 1
        return unsat


def parse_dimacs(text: str) -> CnfInstance:
    """Parse DIMACS CNF; clauses of up to three distinct literals."""
    n_vars = None
    n_clauses = None
    tokens: list[int] = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("c"):
            continue
        if line.startswith("p"):
            parts = line.split()
            if len(parts) != 4 or parts[1] != "cnf":
                raise ParseError(f"bad header {line!r}")
            try:
                n_vars, n_clauses = int(parts[2]), int(parts[3])
            except ValueError:
                raise ParseError(f"bad header {line!r}") from None
            if n_vars < 1 or n_clauses < 1:
                raise ParseError("header must declare positive counts")
            continue
        if n_vars is None:
            raise ParseError("clause data before the problem header")
        try:
            tokens.extend(int(tok) for tok in line.split())
        except ValueError:
            raise ParseError(f"non-integer token in {line!r}") from None
    if n_vars is None:
        raise ParseError("missing problem header")

    clauses: list[tuple[int, ...]] = []
    current: list[int] = []
    for tok in tokens:
        if tok == 0:
            if not current:
                raise ParseError("empty clause")
            clauses.append(tuple(current))
            current = []
            continue
        if abs(tok) > n_vars:
            raise ParseError(f"literal {tok} outside 1..{n_vars}")
        if tok in current:
            raise ParseError(f"duplicate literal {tok} in clause")
        current.append(tok)
        if len(current) > 3:
            raise ParseError("clause has more than 3 literals")
    if current:
        raise ParseError("missing terminating 0 after the last clause")
    if len(clauses) != n_clauses:
        raise ParseError(f"header declared {n_clauses} clauses, found {len(clauses)}")
    return CnfInstance(n_vars=n_vars, clauses=tuple(clauses))


@dataclass
class ReductionNet:
    """First layer as a real affine+relu stack; the second layer is the
    pairwise copy-summing wiring, applied after the relu."""

    instance: CnfInstance
    hidden: Affine
    target: Array  # x_r

    @property
    def dims(self) -> tuple[int, int, int]:
        n = self.instance.n_vars
        m = self.instance.n_clauses
        q = self.instance.occurrence_bound
        return n, m + 2 * COPY_FACTOR * q * q * n, m + COPY_FACTOR * q * q * n

    def forward(self, x) -> Array:
        """Evaluate the network on a batch of encodings in [-1, 1]^n."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        h, _ = forward([self.hidden, Relu()], x)
        m = self.instance.n_clauses
        copies = (h.shape[1] - m) // 2
        return np.concatenate(
            [h[:, :m], h[:, m:m + copies] + h[:, m + copies:]], axis=1)

    def distances(self, x) -> Array:
        """Euclidean distance of f(x) to the target, per row."""
        diff = self.forward(x) - self.target
        return np.sqrt((diff * diff).sum(axis=1))


def build_reduction(instance: CnfInstance) -> ReductionNet:
    n = instance.n_vars
    m = instance.n_clauses
    if n > MAX_VARS or m > MAX_CLAUSES:
        raise TooLarge(f"instance {n} vars / {m} clauses exceeds "
                       f"{MAX_VARS}/{MAX_CLAUSES}")
    q = instance.occurrence_bound
    copies = COPY_FACTOR * q * q
    m1 = m + 2 * copies * n

    w1 = np.zeros((m1, n))
    bias = np.zeros(m1)
    for j, clause in enumerate(instance.clauses):
        for lit in clause:
            w1[j, abs(lit) - 1] = 1.0 if lit > 0 else -1.0
        bias[j] = -2.0
    eye = np.eye(n)
    w1[m:m + copies * n] = np.repeat(eye, copies, axis=0)
    w1[m + copies * n:] = -np.repeat(eye, copies, axis=0)

    target = np.concatenate([np.zeros(m), np.ones(copies * n)])
    return ReductionNet(instance=instance,
                        hidden=Affine(w1, bias, trainable=False),
                        target=target)


def all_binary_encodings(n: int) -> Array:
    """Every x in {-1, +1}^n; row bit b=1 encodes x_i = -1 (variable true)."""
    if n > MAX_VARS:
        raise TooLarge(f"{n} variables exceed the exhaustive cap {MAX_VARS}")
    grid = ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(np.float64)
    return 1.0 - 2.0 * grid


def encoding_to_assignment(x: Array) -> list[bool]:
    return [bool(v < 0) for v in x]


def round_to_sign(x) -> Array:
    """Nearest point of {-1, +1}^n (ties at 0 round up)."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0.0, 1.0, -1.0)


@dataclass
class CompletenessReport:
    n_satisfying: int
    violations: list[int]  # row indices of satisfying encodings missing x_r

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass
class SoundnessReport:
    gamma: float
    n_within_gamma: int
    counting_violations: int      # binary x with unsat > ||f(x) - x_r||^2
    max_unsat_over_bound: float   # max of unsat - ||f(x) - x_r||^2
    fraction_bound_checked: bool  # asymptotic (1/8 - 5/sqrt(Q)) m bound applied
    rounding_ok: bool

    @property
    def ok(self) -> bool:
        return self.counting_violations == 0 and self.rounding_ok


def _batched_forward(net: ReductionNet, xs: Array, chunk: int = 128):
    for start in range(0, xs.shape[0], chunk):
        yield xs[start:start + chunk], net.forward(xs[start:start + chunk])


def check_completeness(net: ReductionNet, instance: CnfInstance) -> CompletenessReport:
    """Every satisfying assignment's encoding must hit the target exactly."""
    xs = all_binary_encodings(instance.n_vars)
    n_satisfying = 0
    violations: list[int] = []
    offset = 0
    for block, outputs in _batched_forward(net, xs):
        for i in range(block.shape[0]):
            assignment = encoding_to_assignment(block[i])
            if instance.unsatisfied_count(assignment) == 0:
                n_satisfying += 1
                if not np.array_equal(outputs[i], net.target):
                    violations.append(offset + i)
        offset += block.shape[0]
    return CompletenessReport(n_satisfying=n_satisfying, violations=violations)


def check_soundness(net: ReductionNet, instance: CnfInstance,
                    gamma: float | None = None, rng_seed: int = 0,
                    n_rounding_checks: int = 1000) -> SoundnessReport:
    """Exhaustive binary check of the proof's counting inequality, plus the
    fraction bound where it is non-vacuous, plus the rounding map.

    For every binary x the number of unsatisfied clauses must not exceed
    ||f(x) - x_r||^2 (on 3-literal clauses they are equal). For x within
    gamma * sqrt(o) of the target, when (1/8 - 5/sqrt(Q)) m is positive the
    unsatisfied count must also stay below it; at desk scale Q that bound is
    negative and only the counting inequality is informative.
    """
    q = max(instance.occurrence_bound, 1)
    if gamma is None:
        gamma = 1.0 / (60.0 * q)
    m = instance.n_clauses
    o = net.dims[2]
    threshold = gamma * np.sqrt(o)
    fraction_bound = (1.0 / 8.0 - 5.0 / np.sqrt(q)) * m

    xs = all_binary_encodings(instance.n_vars)
    counting_violations = 0
    max_gap = -np.inf
    n_within = 0
    for block, outputs in _batched_forward(net, xs):
        sq_dist = ((outputs - net.target) ** 2).sum(axis=1)
        for i in range(block.shape[0]):
            unsat = instance.unsatisfied_count(encoding_to_assignment(block[i]))
            gap = unsat - sq_dist[i]
            max_gap = max(max_gap, gap)
            if gap > 1e-9:
                counting_violations += 1
            if np.sqrt(sq_dist[i]) <= threshold:
                n_within += 1
                if fraction_bound > 0 and unsat > fraction_bound:
                    counting_violations += 1

    rng = np.random.default_rng(rng_seed)
    samples = rng.uniform(-1.0, 1.0, size=(n_rounding_checks, instance.n_vars))
    rounded = round_to_sign(samples)
    rounding_ok = bool(np.all(np.abs(rounded - samples) <= np.abs(-rounded - samples)))

    return SoundnessReport(gamma=gamma, n_within_gamma=n_within,
                           counting_violations=counting_violations,
                           max_unsat_over_bound=float(max_gap),
                           fraction_bound_checked=fraction_bound > 0,
                           rounding_ok=rounding_ok)


def report_text(name: str, instance: CnfInstance, net: ReductionNet,
                completeness: CompletenessReport,
                soundness: SoundnessReport) -> str:
    n, m1, o = net.dims
    return (
        f"instance={name}\n"
        f"n={instance.n_vars}\n"
        f"m={instance.n_clauses}\n"
        f"Q={instance.occurrence_bound}\n"
        f"dims={n}x{m1}x{o}\n"
        f"satisfying_assignments={completeness.n_satisfying}\n"
        f"completeness_violations={len(completeness.violations)}\n"
        f"max_unsat_over_bound={soundness.max_unsat_over_bound:.6f}\n"
        f"counting_violations={soundness.counting_violations}\n"
        f"rounding_ok={int(soundness.rounding_ok)}\n"
    )
