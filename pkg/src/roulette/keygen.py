"""Label-encryption keys: uniformly random derangements and their inverses.

A key is a fixed-point-free permutation of the class indices {0..N-1}. The
sampler is the rejection-free algorithm of Martinez, Panholzer and Prodinger
(2008), which walks the array from the top index down and closes a 2-cycle
with probability (u-1) * D[u-2] / D[u], where u counts the still-deranged
positions. The comparison is done in exact integer arithmetic against a
53-bit uniform draw so no float-ratio bias creeps in.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRange, InvalidClassCount, KeyFileError, Overflow

# D[33] still fits unsigned 128-bit arithmetic; class counts beyond that are
# out of scope for the classification tasks this package targets.
MAX_CLASSES = 33

_UNIFORM_BITS = 53
_UNIFORM_DEN = 1 << _UNIFORM_BITS


def count_derangements(i: int) -> int:
    """Exact number of derangements of i items (D_0 = 1, D_1 = 0, recurrence)."""
    if i < 0:
        raise InvalidClassCount(f"negative size {i}")
    if i > MAX_CLASSES:
        raise Overflow(f"derangement count only supported up to {MAX_CLASSES}")
    return _derangement_table(i)[i]


def _derangement_table(n: int) -> list[int]:
    table = [1, 0]
    for k in range(2, n + 1):
        table.append((k - 1) * (table[k - 1] + table[k - 2]))
    return table[: n + 1]


@dataclass(frozen=True)
class Permutation:
    """A bijection on {0..N-1}; fixed points permitted (identity is legal).

    Used as a test-mode relaxation of DerangementKey so pipelines can run
    with encryption disabled.
    """

    forward: tuple[int, ...]
    inverse: tuple[int, ...]

    @classmethod
    def from_mapping(cls, mapping) -> "Permutation":
        forward = tuple(int(v) for v in mapping)
        n = len(forward)
        if sorted(forward) != list(range(n)):
            raise KeyFileError(f"mapping {forward} is not a bijection on 0..{n - 1}")
        inverse = [0] * n
        for i, v in enumerate(forward):
            inverse[v] = i
        return cls(forward=forward, inverse=tuple(inverse))

    @classmethod
    def identity(cls, n_classes: int) -> "Permutation":
        idx = tuple(range(n_classes))
        return cls(forward=idx, inverse=idx)

    @property
    def n_classes(self) -> int:
        return len(self.forward)

    def encrypt(self, class_index: int) -> int:
        if not 0 <= class_index < self.n_classes:
            raise IndexOutOfRange(f"class index {class_index} outside 0..{self.n_classes - 1}")
        return self.forward[class_index]

    def decrypt(self, class_index: int) -> int:
        if not 0 <= class_index < self.n_classes:
            raise IndexOutOfRange(f"class index {class_index} outside 0..{self.n_classes - 1}")
        return self.inverse[class_index]

    def encrypt_labels(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise IndexOutOfRange("label outside the key's class range")
        return np.asarray(self.forward, dtype=np.int64)[labels]

    def decrypt_labels(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise IndexOutOfRange("label outside the key's class range")
        return np.asarray(self.inverse, dtype=np.int64)[labels]


class DerangementKey(Permutation):
    """A Permutation with no fixed points."""

    @classmethod
    def from_mapping(cls, mapping) -> "DerangementKey":
        perm = Permutation.from_mapping(mapping)
        for i, v in enumerate(perm.forward):
            if i == v:
                raise KeyFileError(f"mapping has fixed point at {i}")
        return cls(forward=perm.forward, inverse=perm.inverse)


def key_gen(n_classes: int, rng: np.random.Generator) -> DerangementKey:
    """Draw a uniformly random derangement of {0..n_classes-1}."""
    if n_classes < 2:
        raise InvalidClassCount(f"need at least 2 classes, got {n_classes}")
    if n_classes > MAX_CLASSES:
        raise InvalidClassCount(f"class counts above {MAX_CLASSES} unsupported")
    d = _derangement_table(n_classes)
    key = list(range(n_classes))
    marked = [False] * n_classes
    u = n_classes
    for i in range(n_classes - 1, 0, -1):
        if u < 2:
            break
        if marked[i]:
            continue
        while True:
            j = int(rng.integers(0, i))
            if not marked[j]:
                break
        key[i], key[j] = key[j], key[i]
        # Close the 2-cycle (i j) with probability (u-1) * D[u-2] / D[u],
        # compared exactly: draw k uniform in [0, 2^53) and test
        # k * D[u] < (u-1) * D[u-2] * 2^53.
        draw = int(rng.integers(0, _UNIFORM_DEN))
        if draw * d[u] < (u - 1) * d[u - 2] * _UNIFORM_DEN:
            marked[j] = True
            u -= 1
        u -= 1
    return DerangementKey.from_mapping(key)


def enumerate_derangements(n_classes: int) -> list[DerangementKey]:
    """All derangements of {0..n_classes-1} in lexicographic order."""
    if n_classes < 2:
        raise InvalidClassCount(f"need at least 2 classes, got {n_classes}")
    keys = []
    for perm in itertools.permutations(range(n_classes)):
        if all(i != v for i, v in enumerate(perm)):
            keys.append(DerangementKey.from_mapping(perm))
    return keys


def save_key(path, key: Permutation) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"N={key.n_classes}\n")
        fh.write("key=" + ",".join(str(v) for v in key.forward) + "\n")


def load_key(path) -> DerangementKey:
    """Read a key file; rejects anything that is not a derangement."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if len(lines) != 2 or not lines[0].startswith("N=") or not lines[1].startswith("key="):
        raise KeyFileError("expected two lines: N=<int> and key=<mapping>")
    try:
        n = int(lines[0][2:])
        mapping = [int(tok) for tok in lines[1][4:].split(",")]
    except ValueError as exc:
        raise KeyFileError(f"unparseable key file: {exc}") from None
    if len(mapping) != n:
        raise KeyFileError(f"mapping length {len(mapping)} != N={n}")
    return DerangementKey.from_mapping(mapping)
