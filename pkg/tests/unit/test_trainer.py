"""Tests for the training loop on a tiny synthetic dataset."""

import math

import numpy as np
import pandas as pd
import pytest

from svtnet import checkpoint
from svtnet.dataset import DatasetError, gen_synth
from svtnet.training import train


@pytest.fixture
def dataset(tmp_path, small_synth):
    return gen_synth(small_synth, tmp_path / "data")


def test_smoke(dataset, tiny_experiment):
    result = train(dataset.split("train"), tiny_experiment)

    assert [r.epoch for r in result.history] == [0, 1]
    assert result.iterations > 0
    for record in result.history:
        if record.iterations:
            assert math.isfinite(record.loss)
            assert 0.0 <= record.active_fraction <= 1.0
        assert 4 <= record.batch_size <= 8
    assert result.history[0].lr == pytest.approx(1e-3)
    assert result.history[1].lr == pytest.approx(1e-4)

    out_dir = tiny_experiment.output_dir / "train"
    assert (out_dir / "checkpoints" / "epoch_000.svtn").exists()
    assert (out_dir / "checkpoints" / "epoch_001.svtn").exists()
    assert result.final_checkpoint == out_dir / "model.svtn"

    loaded = checkpoint.load(result.final_checkpoint)
    for name, array in result.params.state().items():
        assert np.array_equal(loaded.state()[name], array), name

    log = pd.read_csv(result.log_file)
    assert list(log.columns) == ["epoch", "loss", "active_fraction", "batch_size", "lr"]
    assert len(log) == 2


def test_same_seed_gives_identical_checkpoints(dataset, tiny_experiment, tmp_path):
    train_set = dataset.split("train")
    a = train(train_set, tiny_experiment, out_dir=tmp_path / "a")
    b = train(train_set, tiny_experiment, out_dir=tmp_path / "b")
    assert a.final_checkpoint.read_bytes() == b.final_checkpoint.read_bytes()


def test_worker_count_does_not_change_result(dataset, tiny_experiment, tmp_path):
    train_set = dataset.split("train")
    tiny_experiment.workers = 1
    a = train(train_set, tiny_experiment, out_dir=tmp_path / "one")
    tiny_experiment.workers = 3
    b = train(train_set, tiny_experiment, out_dir=tmp_path / "three")
    assert a.final_checkpoint.read_bytes() == b.final_checkpoint.read_bytes()


def test_max_iterations_stops_early(dataset, tiny_experiment):
    tiny_experiment.training.max_iterations = 1
    result = train(dataset.split("train"), tiny_experiment)
    assert result.iterations == 1
    assert len(result.history) == 1


def test_on_epoch_callback(dataset, tiny_experiment):
    seen = []
    train(dataset.split("train"), tiny_experiment, on_epoch=seen.append)
    assert [r.epoch for r in seen] == [0, 1]


def test_no_positive_pairs(dataset, tiny_experiment):
    # the test split holds one copy per scene, 60 m apart
    with pytest.raises(DatasetError, match="no positive pairs"):
        train(dataset.split("test"), tiny_experiment)
