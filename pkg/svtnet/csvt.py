"""
Cluster-based Sparse Voxel Transformer.

Tokenizer: a grouping map softly assigns each voxel to L_t tokens and pools
voxel features into token representations. Transformer: the tokens attend to
each other through shared row-wise linear maps. Projector: tokens are carried
back to the voxels through a re-projection map and added to the input.
All three run independently per cloud of a batched grid.
"""

from dataclasses import dataclass
from typing import List, Literal, Optional, Tuple

import numpy as np

from svtnet.layers import (
    Context,
    GridNode,
    LinearParams,
    ParamTree,
    SPConvParams,
    linear,
    pointwise,
)

SoftmaxAxis = Literal["tokens", "voxels"]


@dataclass(eq=False)
class CSVTParams(ParamTree):
    conv_group: SPConvParams
    conv_tokfeat: SPConvParams
    lin_q: LinearParams
    lin_k: LinearParams
    lin_v: LinearParams
    lin_attn_out: LinearParams
    lin_p: LinearParams
    conv_proj_query: SPConvParams
    conv_out: SPConvParams
    softmax_axis: str = "tokens"

    @property
    def channels(self) -> int:
        return self.conv_tokfeat.in_channels

    @property
    def token_count(self) -> int:
        return self.conv_group.out_channels

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        channels: int,
        token_count: int = 8,
        softmax_axis: SoftmaxAxis = "tokens",
    ) -> "CSVTParams":
        if token_count < 1:
            raise ValueError(f"token count must be >= 1, got {token_count}")
        if softmax_axis not in ("tokens", "voxels"):
            raise ValueError(f"unknown softmax axis: {softmax_axis}")
        c = channels
        return cls(
            conv_group=SPConvParams.init(rng, 1, c, token_count, bias=True),
            conv_tokfeat=SPConvParams.init(rng, 1, c, c, bias=True),
            lin_q=LinearParams.init(rng, c, c),
            lin_k=LinearParams.init(rng, c, c),
            lin_v=LinearParams.init(rng, c, c),
            lin_attn_out=LinearParams.init(rng, c, c),
            lin_p=LinearParams.init(rng, c, c),
            conv_proj_query=SPConvParams.init(rng, 1, c, c, bias=True),
            conv_out=SPConvParams.init(rng, 1, c, c, bias=True),
            softmax_axis=softmax_axis,
        )


def _assignment_softmax(ctx: Context, logits: int, axis: str) -> int:
    """Softmax of an N x L_t matrix over tokens (default) or over voxels."""
    tape = ctx.tape
    if axis == "tokens":
        return tape.row_softmax(logits)
    return tape.transpose(tape.row_softmax(tape.transpose(logits)))


def _check(x: GridNode, params: CSVTParams) -> None:
    if x.grid.channels != params.channels:
        raise ValueError(f"csvt: expected {params.channels} input channels, got {x.grid.channels}")
    if x.grid.num_voxels == 0:
        raise ValueError("csvt: no voxels")


def tokenize(ctx: Context, x: GridNode, params: CSVTParams) -> Tuple[List[int], List[int]]:
    """
    Grouping maps and token sets.

    Returns:
        (tokens, grouping): per cloud, an L_t x C token node T = X_g^T conv_tokfeat(X)
        and the N_b x L_t grouping-map node X_g
    """
    _check(x, params)
    tape = ctx.tape
    logits = pointwise(ctx, x, params.conv_group).node
    feats = pointwise(ctx, x, params.conv_tokfeat).node

    tokens, grouping = [], []
    for rows in x.grid.segments:
        xg = _assignment_softmax(ctx, tape.gather_rows(logits, rows), params.softmax_axis)
        tokens.append(tape.matmul(tape.transpose(xg), tape.gather_rows(feats, rows)))
        grouping.append(xg)
    return tokens, grouping


def token_transformer(ctx: Context, tokens: int, params: CSVTParams) -> int:
    """T_s = T + lin_attn_out(row_softmax(T_q T_k^T) T_v) on one L_t x C token set."""
    tape = ctx.tape
    rows, cols = tape.value(tokens).shape
    if rows != params.token_count or cols != params.channels:
        raise ValueError(
            f"token_transformer: expected {params.token_count}x{params.channels} tokens, "
            f"got {rows}x{cols}"
        )
    tq = linear(ctx, tokens, params.lin_q)
    tk = linear(ctx, tokens, params.lin_k)
    tv = linear(ctx, tokens, params.lin_v)
    weights = tape.row_softmax(tape.matmul(tq, tape.transpose(tk)))
    return tape.add(tokens, linear(ctx, tape.matmul(weights, tv), params.lin_attn_out))


def project(
    ctx: Context,
    x: GridNode,
    tokens: List[int],
    params: CSVTParams,
    trace: Optional[List[int]] = None,
) -> GridNode:
    """
    X_in + conv_out(M_p T_p) with T_p = lin_p(T_s) and
    M_p = softmax(conv_proj_query(X_in) T_p^T) over tokens, per cloud.

    If `trace` is given, the re-projection map of every cloud is appended to it.
    """
    _check(x, params)
    segments = x.grid.segments
    if len(tokens) != len(segments):
        raise ValueError(f"project: {len(tokens)} token sets for {len(segments)} clouds")
    tape = ctx.tape
    query = pointwise(ctx, x, params.conv_proj_query).node

    projected = []
    for rows, ts in zip(segments, tokens):
        tp = linear(ctx, ts, params.lin_p)
        logits = tape.matmul(tape.gather_rows(query, rows), tape.transpose(tp))
        mp = _assignment_softmax(ctx, logits, params.softmax_axis)
        if trace is not None:
            trace.append(mp)
        projected.append(tape.matmul(mp, tp))
    mixed = projected[0] if len(projected) == 1 else tape.concat_rows(projected)

    xs = pointwise(ctx, ctx.wrap(x.grid, mixed), params.conv_out)
    return ctx.wrap(x.grid, tape.add(x.node, xs.node))


def csvt_forward(
    ctx: Context,
    x: GridNode,
    params: CSVTParams,
    trace: Optional[dict] = None,
) -> GridNode:
    """
    Tokenize, transform, project.

    If `trace` is a dict, it receives "grouping" and "reprojection" node lists.
    """
    tokens, grouping = tokenize(ctx, x, params)
    transformed = [token_transformer(ctx, t, params) for t in tokens]
    reprojection: List[int] = []
    out = project(ctx, x, transformed, params, trace=reprojection)
    if trace is not None:
        trace["grouping"] = grouping
        trace["reprojection"] = reprojection
    return out
