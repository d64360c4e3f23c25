"""Finite-difference checks of every op, layer and a tiny model."""

import numpy as np
import pytest

from svtnet import gradcheck
from svtnet.autodiff import OPS
from svtnet.gradcheck import (
    LAYER_TOLERANCE,
    GradCheckResult,
    check_layers,
    check_model,
    check_ops,
    randomize_running_stats,
    sample_components,
    tiny_model,
)
from svtnet.layers import Context


@pytest.fixture
def context_modes(monkeypatch):
    """Modes of every Context the gradient suite builds."""
    modes = []

    class RecordingContext(Context):
        def __init__(self, mode="eval", tape=None):
            modes.append(mode)
            super().__init__(mode, tape)

    monkeypatch.setattr(gradcheck, "Context", RecordingContext)
    return modes


def test_every_op_passes():
    results = check_ops(seed=0)
    assert {r.name for r in results} == set(OPS)
    failed = [(r.name, r.error) for r in results if not r.passed]
    assert failed == []


def test_every_layer_passes():
    results = check_layers(seed=0)
    names = {r.name for r in results}
    assert {"sp_conv K3", "res_block", "asvt", "gem_pool", "triplet_loss"} <= names
    failed = [(r.name, r.error) for r in results if not r.passed]
    assert failed == []
    assert all(r.tolerance == LAYER_TOLERANCE for r in results)


def test_layer_checks_use_eval_mode(context_modes):
    names = [r.name for r in check_layers(seed=0)]
    assert "batch_norm (train)" in names
    assert "eval" in context_modes
    assert "train" in context_modes


def test_model_check_uses_eval_mode(context_modes):
    check_model(seed=0, per_tensor=1)
    assert context_modes and set(context_modes) == {"eval"}


def test_randomized_running_stats_are_not_identity(rng):
    params = tiny_model(0)
    randomize_running_stats(params, rng)
    buffers = dict(params.named_buffers())
    assert buffers
    for name, buffer in buffers.items():
        if name.endswith("running_var"):
            assert np.all((buffer >= 0.5) & (buffer <= 1.5))
            assert not np.allclose(buffer, 1.0)
        else:
            assert not np.allclose(buffer, 0.0)


@pytest.mark.parametrize("variant", ["svt", "asvt_only", "csvt_only"])
def test_tiny_model_passes(variant):
    result = check_model(seed=0, variant=variant)
    assert result.passed, result.error


def test_sample_components_covers_every_tensor(rng):
    owners = ["a"] * 10 + ["b"] * 2 + ["c"] * 5
    picked = sample_components(owners, 3, rng)
    assert len(picked) == 3 + 2 + 3
    assert [owners[i] for i in picked] == ["a"] * 3 + ["b"] * 2 + ["c"] * 3
    assert len(set(picked)) == len(picked)


def test_nan_error_fails():
    assert not GradCheckResult("op", "x", float("nan"), 1e-5).passed
    assert GradCheckResult("op", "x", 1e-7, 1e-5).passed
