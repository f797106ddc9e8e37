"""Seeded train/validation/test partitioning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MIN_SAMPLES = 10


@dataclass(frozen=True)
class SplitSpec:
    train: float = 7
    val: float = 1
    test: float = 2
    seed: int = 0

    def __post_init__(self):
        if min(self.train, self.val, self.test) <= 0:
            raise ConfigError("split ratios must be positive")

    @property
    def ratios(self):
        return (self.train, self.val, self.test)


def split_sizes(n, spec: SplitSpec):
    total = sum(spec.ratios)
    n_val = int(n * spec.val // total)
    n_test = int(n * spec.test // total)
    return n - n_val - n_test, n_val, n_test


def split_dataset(ids, spec: SplitSpec = SplitSpec()):
    """Shuffle ``ids`` with ``spec.seed`` and cut into train/val/test.

    val and test sizes are floored; the remainder goes to train.  The result
    does not depend on the order of ``ids``.
    """
    ids = sorted(ids)
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate ids")
    if len(ids) < MIN_SAMPLES:
        raise ConfigError(f"need at least {MIN_SAMPLES} samples to split, got {len(ids)}")
    n_train, n_val, _ = split_sizes(len(ids), spec)
    order = np.random.default_rng(spec.seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train : n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val :]),
    }
