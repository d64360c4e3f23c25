"""
Triplet loss with batch-hard mining.

Pair labels come from planar positions: pairs within the positive radius are
positives, pairs at least the negative radius apart are negatives, anything in
between is ignored. Distances are raw Euclidean (descriptors are not normalized).
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from svtnet.autodiff import Tape


class DegenerateBatchError(ValueError):
    """No anchor in the batch has both a positive and a negative."""
    pass


@dataclass(frozen=True)
class PairLabels:
    """Boolean B x B masks; the diagonal is never a positive or a negative."""

    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        if self.positives.shape != self.negatives.shape or self.positives.ndim != 2:
            raise ValueError("positive and negative masks must be matching square matrices")
        if np.any(self.positives & self.negatives):
            raise ValueError("a pair cannot be both positive and negative")

    @property
    def size(self) -> int:
        return self.positives.shape[0]

    @property
    def valid_anchors(self) -> np.ndarray:
        """Anchors with at least one positive and one negative."""
        return np.flatnonzero(self.positives.any(axis=1) & self.negatives.any(axis=1))


def pair_labels(
    positions: np.ndarray,
    positive_radius: float = 10.0,
    negative_radius: float = 50.0,
) -> PairLabels:
    """Label all pairs of an (B, 2) array of northing/easting positions."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 2:
        raise ValueError(f"positions must be (B, 2), got {positions.shape}")
    if not np.all(np.isfinite(positions)):
        raise ValueError("positions must be finite")
    dist = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=2)
    off_diagonal = ~np.eye(len(positions), dtype=bool)
    return PairLabels(
        positives=(dist <= positive_radius) & off_diagonal,
        negatives=(dist >= negative_radius) & off_diagonal,
    )


def pairwise_distances(descriptors: np.ndarray) -> np.ndarray:
    diff = descriptors[:, None, :] - descriptors[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def mine_batch_hard(
    descriptors: np.ndarray, labels: PairLabels
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Hardest positive (farthest) and hardest negative (closest) per valid anchor.

    Ties go to the lowest index.

    Returns:
        (anchors, positives, negatives) index arrays of equal length
    """
    if descriptors.shape[0] != labels.size:
        raise ValueError(
            f"{descriptors.shape[0]} descriptors for a {labels.size}x{labels.size} label matrix"
        )
    anchors = labels.valid_anchors
    dist = pairwise_distances(descriptors)[anchors]
    hardest_pos = np.argmax(np.where(labels.positives[anchors], dist, -np.inf), axis=1)
    hardest_neg = np.argmin(np.where(labels.negatives[anchors], dist, np.inf), axis=1)
    return anchors, hardest_pos, hardest_neg


def triplet_loss_batch_hard(
    tape: Tape,
    descriptors: int,
    labels: PairLabels,
    margin: float,
    reduction: str = "mean",
) -> Tuple[int, int]:
    """
    max(d(a, p*) - d(a, n*) + m, 0) over valid anchors, reduced by mean or sum.

    Args:
        tape: Tape holding the descriptor node
        descriptors: (B, d) descriptor node
        labels: Pair labels of the batch
        margin: Triplet margin m
        reduction: "mean" (default) or "sum" over valid anchors

    Returns:
        (loss node (1x1), number of anchors with strictly positive loss)

    Raises:
        DegenerateBatchError: If no anchor has both a positive and a negative
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction: {reduction}")
    values = tape.value(descriptors)
    if values.shape[0] < 2:
        raise DegenerateBatchError("degenerate batch: need at least 2 descriptors")

    anchors, pos, neg = mine_batch_hard(values, labels)
    if len(anchors) == 0:
        raise DegenerateBatchError("degenerate batch: no anchor has a positive and a negative")

    a = tape.gather_rows(descriptors, anchors)
    d_pos = tape.row_l2norm(tape.subtract(a, tape.gather_rows(descriptors, pos)))
    d_neg = tape.row_l2norm(tape.subtract(a, tape.gather_rows(descriptors, neg)))
    gap = tape.add(tape.subtract(d_pos, d_neg), tape.constant([[margin]]))
    hinge = tape.relu(gap)

    active = int(np.count_nonzero(tape.value(hinge) > 0.0))
    total = tape.sum_all(hinge)
    if reduction == "mean":
        total = tape.scale(total, 1.0 / len(anchors))
    return total, active
