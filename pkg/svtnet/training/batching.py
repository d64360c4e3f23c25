"""
Dynamic batch sizing and batch construction.
"""

import math
from dataclasses import dataclass
from typing import Iterator, List

import numpy as np


@dataclass
class BatchSizer:
    """
    Grows the batch when too few triplets are still active.

    The size only ever increases and never exceeds `max_size`.
    """

    size: int = 32
    max_size: int = 256
    growth: float = 1.4
    trigger: float = 0.7

    def __post_init__(self):
        if not 1 <= self.size <= self.max_size:
            raise ValueError(f"batch size {self.size} outside [1, {self.max_size}]")


def dynamic_batch_update(active: int, sizer: BatchSizer) -> int:
    """
    If active < trigger * size, grow to min(max_size, floor(growth * size)).

    Returns:
        The (possibly unchanged) new size, also stored on the sizer
    """
    if active < 0:
        raise ValueError(f"active triplet count must be >= 0, got {active}")
    if active < sizer.trigger * sizer.size:
        sizer.size = min(sizer.max_size, math.floor(sizer.growth * sizer.size))
    return sizer.size


def positive_neighbors(positions: np.ndarray, radius: float) -> List[np.ndarray]:
    """Per sample, the indices of other samples within `radius` meters."""
    positions = np.asarray(positions, dtype=np.float64)
    dist = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=2)
    np.fill_diagonal(dist, np.inf)
    return [np.flatnonzero(row <= radius) for row in dist]


def epoch_batches(
    neighbors: List[np.ndarray],
    sizer: BatchSizer,
    rng: np.random.Generator,
) -> Iterator[np.ndarray]:
    """
    One pass over all samples in shuffled order.

    Each anchor is followed by one randomly chosen positive not yet used this
    epoch, so every batch holds positive pairs; different anchors provide the
    negatives. The sizer is read before every batch, so growth applied by the
    caller between batches takes effect immediately.
    """
    n = len(neighbors)
    order = rng.permutation(n)
    used = np.zeros(n, dtype=bool)
    cursor = 0
    while True:
        batch: List[int] = []
        while len(batch) < sizer.size:
            while cursor < n and used[order[cursor]]:
                cursor += 1
            if cursor == n:
                break
            anchor = int(order[cursor])
            used[anchor] = True
            batch.append(anchor)
            free = neighbors[anchor][~used[neighbors[anchor]]]
            if len(free) and len(batch) < sizer.size:
                positive = int(free[rng.integers(len(free))])
                used[positive] = True
                batch.append(positive)
        if not batch:
            return
        yield np.array(batch, dtype=np.int64)
