"""Tests for dynamic batch sizing and epoch batch construction."""

import numpy as np
import pytest

from svtnet.training.batching import (
    BatchSizer,
    dynamic_batch_update,
    epoch_batches,
    positive_neighbors,
)


class TestDynamicBatchUpdate:
    def test_grows_when_few_triplets_are_active(self):
        assert dynamic_batch_update(20, BatchSizer(32)) == 44

    def test_unchanged_above_trigger(self):
        sizer = BatchSizer(32)
        assert dynamic_batch_update(30, sizer) == 32
        assert sizer.size == 32

    def test_capped_at_max(self):
        assert dynamic_batch_update(0, BatchSizer(200)) == 256

    def test_growth_sequence(self):
        sizer = BatchSizer(32)
        sizes = [sizer.size]
        for _ in range(8):
            sizes.append(dynamic_batch_update(0, sizer))
        assert sizes == [32, 44, 61, 85, 119, 166, 232, 256, 256]

    def test_never_shrinks(self, rng):
        sizer = BatchSizer(16)
        previous = sizer.size
        for active in rng.integers(0, 300, size=50):
            size = dynamic_batch_update(int(active), sizer)
            assert previous <= size <= 256
            previous = size

    def test_negative_active_count(self):
        with pytest.raises(ValueError):
            dynamic_batch_update(-1, BatchSizer())

    def test_initial_size_checked(self):
        with pytest.raises(ValueError):
            BatchSizer(300)


class TestEpochBatches:
    @pytest.fixture
    def positions(self):
        # six places, two observations each
        centers = np.array([[60.0 * i, 0.0] for i in range(6)])
        return np.repeat(centers, 2, axis=0) + np.tile([[0.0, 0.0], [0.5, 0.5]], (6, 1))

    def test_positive_neighbors(self, positions):
        neighbors = positive_neighbors(positions, 10.0)
        assert [n.tolist() for n in neighbors[:4]] == [[1], [0], [3], [2]]

    def test_every_sample_once(self, positions, rng):
        batches = list(epoch_batches(positive_neighbors(positions, 10.0), BatchSizer(4), rng))
        seen = np.concatenate(batches)
        assert sorted(seen.tolist()) == list(range(12))
        assert all(len(b) <= 4 for b in batches)

    def test_anchor_followed_by_positive(self, positions, rng):
        for batch in epoch_batches(positive_neighbors(positions, 10.0), BatchSizer(4), rng):
            for anchor, partner in zip(batch[::2], batch[1::2]):
                assert anchor // 2 == partner // 2

    def test_growth_applies_to_next_batch(self, positions, rng):
        sizer = BatchSizer(2, max_size=8)
        sizes = []
        for batch in epoch_batches(positive_neighbors(positions, 10.0), sizer, rng):
            sizes.append(len(batch))
            sizer.size = 6
        assert sizes[:2] == [2, 6]

    def test_same_seed_same_batches(self, positions):
        neighbors = positive_neighbors(positions, 10.0)
        a = list(epoch_batches(neighbors, BatchSizer(4), np.random.default_rng(3)))
        b = list(epoch_batches(neighbors, BatchSizer(4), np.random.default_rng(3)))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert len(a) == len(b)
