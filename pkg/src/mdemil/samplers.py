"""The two training distributions: the natural one (every bag equally likely) and the class-rebalanced one."""
from __future__ import annotations

from typing import Iterator, List, Sequence, Tuple, Union

import numpy as np

from .bags import DatasetManifest
from .errors import DegenerateInputError, SpecError


class UniformSampler:
    """Yields every training bag exactly once per epoch, in a seeded random order."""

    def __init__(self, labels: Sequence[int], rng: Union[np.random.Generator, int, None] = None):
        self.labels = np.asarray(labels, dtype=int)
        if self.labels.size == 0:
            raise SpecError("uniform sampler needs at least one bag")
        self.rng = np.random.default_rng(rng)

    def __len__(self) -> int:
        return int(self.labels.size)

    def epoch(self) -> np.ndarray:
        return self.rng.permutation(self.labels.size)


class BalancedSampler:
    """Endless stream: pick a class with probability 1/C, then a bag of that class uniformly with replacement."""

    def __init__(self, labels: Sequence[int], num_classes: int, rng: Union[np.random.Generator, int, None] = None):
        labels = np.asarray(labels, dtype=int)
        self.num_classes = int(num_classes)
        self.by_class: List[np.ndarray] = [np.flatnonzero(labels == k) for k in range(self.num_classes)]
        empty = [k for k, idx in enumerate(self.by_class) if idx.size == 0]
        if empty:
            raise SpecError(f"balanced sampling impossible: classes {empty} have no training bags")
        self.rng = np.random.default_rng(rng)

    def draw(self) -> int:
        k = int(self.rng.integers(self.num_classes))
        members = self.by_class[k]
        return int(members[self.rng.integers(members.size)])

    def draw_many(self, n: int) -> np.ndarray:
        return np.array([self.draw() for _ in range(n)], dtype=int)


def epoch_pairs(uniform: UniformSampler, balanced: BalancedSampler) -> Iterator[Tuple[int, int]]:
    """One epoch of ``(U index, B index)`` pairs; length is the number of training bags."""
    for i in uniform.epoch():
        yield int(i), balanced.draw()


def analytic_probs(source: Union[DatasetManifest, Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class sampling probabilities ``(P_U, P_B)`` for class counts or a manifest."""
    counts = np.asarray(source.counts if isinstance(source, DatasetManifest) else source, dtype=float)
    if counts.size == 0 or np.any(counts < 1):
        raise DegenerateInputError(f"every class needs at least one bag, got counts {counts.tolist()}")
    p_u = counts / counts.sum()
    # inverse-frequency weights times class mass collapse to 1/C
    w = 1.0 / counts
    p_b = w * counts / np.sum(w * counts)
    return p_u, p_b
