"""Tests for the atom-based transformer branch."""

import numpy as np
import pytest

from svtnet.asvt import ASVTParams, asvt_forward, attention_map
from svtnet.layers import Context
from svtnet.sparse_tensor import SparseVoxelGrid, collate


def softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def affine(x, conv):
    return x @ conv.weight[0] + conv.bias


def dense_asvt(features, params):
    """Straight-line evaluation with materialized matrices."""
    xv = affine(features, params.conv_v)
    xq = affine(features, params.conv_q)
    xk = affine(features, params.conv_k)
    s = softmax_rows(xq @ xk.T)
    return features + affine(s @ xv, params.conv_out)


def random_grid(rng, n, channels, extent=4):
    cells = rng.choice(extent**3, size=n, replace=False)
    coords = np.stack(np.unravel_index(np.sort(cells), (extent,) * 3), axis=1)
    return SparseVoxelGrid(coords, rng.normal(size=(n, channels)))


@pytest.fixture
def params(rng):
    p = ASVTParams.init(rng, 8, reduction=4)
    for conv in (p.conv_v, p.conv_q, p.conv_k, p.conv_out):
        conv.bias[...] = 0.1 * rng.normal(size=conv.bias.shape)
    return p


def run(grid, params, trace=None):
    ctx = Context()
    out = asvt_forward(ctx, ctx.input(grid), params, trace=trace)
    return ctx, out


class TestAttentionMap:
    def test_single_voxel(self):
        ctx = Context()
        s = attention_map(ctx, ctx.constant([[0.3, -1.2]]), ctx.constant([[2.0, 0.5]]))
        assert ctx.value(s).tolist() == [[1.0]]

    def test_zero_logits_are_uniform(self, rng):
        ctx = Context()
        s = attention_map(ctx, ctx.constant(np.zeros((4, 2))), ctx.constant(rng.normal(size=(4, 2))))
        np.testing.assert_allclose(ctx.value(s), np.full((4, 4), 0.25))

    def test_matches_naive_softmax(self, rng):
        xq, xk = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        ctx = Context()
        s = ctx.value(attention_map(ctx, ctx.constant(xq), ctx.constant(xk)))
        naive = np.exp(xq @ xk.T) / np.exp(xq @ xk.T).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(s, naive, atol=1e-12)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)

    def test_rows_sum_to_one_at_large_scale(self, rng):
        ctx = Context()
        xq = ctx.constant(1e3 * rng.normal(size=(6, 3)))
        xk = ctx.constant(1e3 * rng.normal(size=(6, 3)))
        s = ctx.value(attention_map(ctx, xq, xk))
        assert np.all(np.isfinite(s))
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)


class TestASVTForward:
    def test_zero_output_conv_is_identity(self, rng, params):
        params.conv_out.weight[...] = 0.0
        params.conv_out.bias[...] = 0.0
        grid = random_grid(rng, 6, 8)
        _, out = run(grid, params)
        assert np.array_equal(out.features, grid.features)

    def test_single_voxel_reduces_to_value_path(self, rng, params):
        grid = random_grid(rng, 1, 8)
        _, out = run(grid, params)
        expected = grid.features + affine(affine(grid.features, params.conv_v), params.conv_out)
        np.testing.assert_allclose(out.features, expected, atol=1e-12)

    def test_matches_dense_oracle(self, rng, params):
        grid = random_grid(rng, 5, 8)
        _, out = run(grid, params)
        np.testing.assert_allclose(out.features, dense_asvt(grid.features, params), atol=1e-10)
        assert np.array_equal(out.grid.coords, grid.coords)

    def test_batched_clouds_attend_separately(self, rng, params):
        a, b = random_grid(rng, 5, 8), random_grid(rng, 3, 8)
        _, out = run(collate([a, b]), params)
        np.testing.assert_allclose(out.features[:5], dense_asvt(a.features, params), atol=1e-10)
        np.testing.assert_allclose(out.features[5:], dense_asvt(b.features, params), atol=1e-10)

    def test_trace_collects_one_map_per_cloud(self, rng, params):
        trace = []
        ctx, _ = run(collate([random_grid(rng, 4, 8), random_grid(rng, 2, 8)]), params, trace)
        assert [ctx.value(s).shape for s in trace] == [(4, 4), (2, 2)]

    def test_channel_mismatch(self, rng, params):
        with pytest.raises(ValueError, match="input channels"):
            run(random_grid(rng, 3, 4), params)


def test_parameter_count_at_default_width(rng):
    assert ASVTParams.init(rng, 256, reduction=8).num_parameters() == 148032


def test_reduction_must_divide_channels(rng):
    with pytest.raises(ValueError):
        ASVTParams.init(rng, 10, reduction=4)
