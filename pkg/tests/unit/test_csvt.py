"""Tests for the cluster-based transformer branch: tokenizer, token transformer, projector."""

import numpy as np
import pytest

from svtnet.csvt import CSVTParams, csvt_forward, project, token_transformer, tokenize
from svtnet.layers import Context
from svtnet.sparse_tensor import SparseVoxelGrid, collate


def softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def conv(x, p):
    return x @ p.weight[0] + p.bias


def lin(x, p):
    return x @ p.weight + p.bias


def dense_tokens(x, params):
    xg = softmax_rows(conv(x, params.conv_group))
    return xg.T @ conv(x, params.conv_tokfeat), xg


def dense_transformer(t, params):
    weights = softmax_rows(lin(t, params.lin_q) @ lin(t, params.lin_k).T)
    return t + lin(weights @ lin(t, params.lin_v), params.lin_attn_out)


def dense_project(x, ts, params):
    tp = lin(ts, params.lin_p)
    mp = softmax_rows(conv(x, params.conv_proj_query) @ tp.T)
    return x + conv(mp @ tp, params.conv_out)


def random_grid(rng, n, channels=8, extent=4):
    cells = rng.choice(extent**3, size=n, replace=False)
    coords = np.stack(np.unravel_index(np.sort(cells), (extent,) * 3), axis=1)
    return SparseVoxelGrid(coords, rng.normal(size=(n, channels)))


def make_params(rng, token_count=2, axis="tokens"):
    params = CSVTParams.init(rng, 8, token_count=token_count, softmax_axis=axis)
    for name, _ in list(params.named_parameters()):
        if name.endswith("bias"):
            owner = params
            for part in name.split(".")[:-1]:
                owner = getattr(owner, part)
            owner.bias[...] = 0.1 * rng.normal(size=owner.bias.shape)
    return params


class TestTokenize:
    def test_single_token(self, rng):
        params = make_params(rng, token_count=1)
        grid = random_grid(rng, 5)
        ctx = Context()
        tokens, grouping = tokenize(ctx, ctx.input(grid), params)
        np.testing.assert_allclose(ctx.value(grouping[0]), np.ones((5, 1)))
        feats = conv(grid.features, params.conv_tokfeat)
        np.testing.assert_allclose(ctx.value(tokens[0]), feats.sum(axis=0, keepdims=True))

    def test_zero_grouping_is_uniform(self, rng):
        params = make_params(rng, token_count=4)
        params.conv_group.weight[...] = 0.0
        params.conv_group.bias[...] = 0.0
        grid = random_grid(rng, 6)
        ctx = Context()
        tokens, grouping = tokenize(ctx, ctx.input(grid), params)
        np.testing.assert_allclose(ctx.value(grouping[0]), np.full((6, 4), 0.25))
        column_sums = conv(grid.features, params.conv_tokfeat).sum(axis=0)
        np.testing.assert_allclose(ctx.value(tokens[0]), np.tile(column_sums / 4, (4, 1)))

    def test_matches_dense_oracle(self, rng):
        params = make_params(rng)
        grid = random_grid(rng, 3)
        ctx = Context()
        tokens, grouping = tokenize(ctx, ctx.input(grid), params)
        expected_tokens, expected_grouping = dense_tokens(grid.features, params)
        np.testing.assert_allclose(ctx.value(tokens[0]), expected_tokens, atol=1e-12)
        np.testing.assert_allclose(ctx.value(grouping[0]), expected_grouping, atol=1e-12)

    def test_voxel_axis_softmax_normalizes_columns(self, rng):
        params = make_params(rng, token_count=3, axis="voxels")
        ctx = Context()
        _, grouping = tokenize(ctx, ctx.input(random_grid(rng, 7)), params)
        np.testing.assert_allclose(ctx.value(grouping[0]).sum(axis=0), 1.0, atol=1e-12)

    def test_empty_grid(self, rng):
        grid = SparseVoxelGrid(np.zeros((0, 3)), np.zeros((0, 8)))
        ctx = Context()
        with pytest.raises(ValueError, match="no voxels"):
            tokenize(ctx, ctx.input(grid), make_params(rng))


class TestTokenTransformer:
    def test_zero_output_map_is_identity(self, rng):
        params = make_params(rng, token_count=4)
        params.lin_attn_out.weight[...] = 0.0
        params.lin_attn_out.bias[...] = 0.0
        t = rng.normal(size=(4, 8))
        ctx = Context()
        assert np.array_equal(ctx.value(token_transformer(ctx, ctx.constant(t), params)), t)

    def test_single_token(self, rng):
        params = make_params(rng, token_count=1)
        t = rng.normal(size=(1, 8))
        ctx = Context()
        out = ctx.value(token_transformer(ctx, ctx.constant(t), params))
        expected = t + lin(lin(t, params.lin_v), params.lin_attn_out)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_matches_dense_oracle(self, rng):
        params = make_params(rng, token_count=4)
        t = rng.normal(size=(4, 8))
        ctx = Context()
        out = ctx.value(token_transformer(ctx, ctx.constant(t), params))
        np.testing.assert_allclose(out, dense_transformer(t, params), atol=1e-10)

    def test_wrong_token_count(self, rng):
        ctx = Context()
        with pytest.raises(ValueError, match="expected 2x8"):
            token_transformer(ctx, ctx.constant(np.zeros((3, 8))), make_params(rng))


class TestProject:
    def test_zero_output_conv_is_identity(self, rng):
        params = make_params(rng)
        params.conv_out.weight[...] = 0.0
        params.conv_out.bias[...] = 0.0
        grid = random_grid(rng, 4)
        ctx = Context()
        out = project(ctx, ctx.input(grid), [ctx.constant(rng.normal(size=(2, 8)))], params)
        assert np.array_equal(out.features, grid.features)

    def test_single_token_same_increment_everywhere(self, rng):
        params = make_params(rng, token_count=1)
        grid = random_grid(rng, 4)
        ctx = Context()
        trace = []
        out = project(ctx, ctx.input(grid), [ctx.constant(rng.normal(size=(1, 8)))], params, trace)
        np.testing.assert_allclose(ctx.value(trace[0]), np.ones((4, 1)))
        increment = out.features - grid.features
        np.testing.assert_allclose(increment, np.tile(increment[0], (4, 1)), atol=1e-12)

    def test_matches_dense_oracle(self, rng):
        params = make_params(rng)
        grid = random_grid(rng, 4)
        ts = rng.normal(size=(2, 8))
        ctx = Context()
        out = project(ctx, ctx.input(grid), [ctx.constant(ts)], params)
        np.testing.assert_allclose(out.features, dense_project(grid.features, ts, params), atol=1e-10)

    def test_token_set_count_must_match_clouds(self, rng):
        grid = collate([random_grid(rng, 3), random_grid(rng, 2)])
        ctx = Context()
        with pytest.raises(ValueError, match="2 clouds"):
            project(ctx, ctx.input(grid), [ctx.constant(np.zeros((2, 8)))], make_params(rng))


class TestCSVTForward:
    def test_zero_output_conv_is_identity(self, rng):
        params = make_params(rng)
        params.conv_out.weight[...] = 0.0
        params.conv_out.bias[...] = 0.0
        grid = random_grid(rng, 6)
        ctx = Context()
        out = csvt_forward(ctx, ctx.input(grid), params)
        assert np.array_equal(out.features, grid.features)

    def test_full_branch_matches_dense_oracle(self, rng):
        params = make_params(rng, token_count=3)
        a, b = random_grid(rng, 5), random_grid(rng, 4)
        ctx = Context()
        trace = {}
        out = csvt_forward(ctx, ctx.input(collate([a, b])), params, trace=trace)
        for rows, grid in ((slice(0, 5), a), (slice(5, 9), b)):
            tokens, _ = dense_tokens(grid.features, params)
            expected = dense_project(grid.features, dense_transformer(tokens, params), params)
            np.testing.assert_allclose(out.features[rows], expected, atol=1e-10)
        assert len(trace["grouping"]) == len(trace["reprojection"]) == 2


def test_parameter_count_at_default_width(rng):
    assert CSVTParams.init(rng, 256, token_count=8).num_parameters() == 528392
