"""
Atom-based Sparse Voxel Transformer.

Every non-empty voxel attends to every other voxel of the same cloud:
values, queries and keys come from three kernel-size-1 SP-Convs, the attention
map is the row softmax of Xq Xk^T (no logit scaling), and the attended
features pass through an output SP-Conv and are added back to the input.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from svtnet.layers import Context, GridNode, ParamTree, SPConvParams, pointwise


@dataclass(eq=False)
class ASVTParams(ParamTree):
    conv_v: SPConvParams
    conv_q: SPConvParams
    conv_k: SPConvParams
    conv_out: SPConvParams

    @property
    def channels(self) -> int:
        return self.conv_v.in_channels

    @property
    def reduction(self) -> int:
        return self.channels // self.conv_q.out_channels

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, reduction: int = 8) -> "ASVTParams":
        if reduction < 1 or channels % reduction:
            raise ValueError(f"reduction {reduction} must divide channels {channels}")
        reduced = channels // reduction
        return cls(
            conv_v=SPConvParams.init(rng, 1, channels, channels, bias=True),
            conv_q=SPConvParams.init(rng, 1, channels, reduced, bias=True),
            conv_k=SPConvParams.init(rng, 1, channels, reduced, bias=True),
            conv_out=SPConvParams.init(rng, 1, channels, channels, bias=True),
        )


def attention_map(ctx: Context, xq: int, xk: int) -> int:
    """S = row_softmax(Xq Xk^T), an N x N node whose rows sum to 1."""
    tape = ctx.tape
    if tape.value(xq).shape[0] == 0:
        raise ValueError("attention_map: no voxels")
    return tape.row_softmax(tape.matmul(xq, tape.transpose(xk)))


def asvt_forward(
    ctx: Context,
    x: GridNode,
    params: ASVTParams,
    trace: Optional[List[int]] = None,
) -> GridNode:
    """
    X_in + conv_out(S X_v), attention computed independently per cloud.

    If `trace` is given, the attention-map node of every cloud is appended to it.
    """
    if x.grid.channels != params.channels:
        raise ValueError(
            f"asvt: expected {params.channels} input channels, got {x.grid.channels}"
        )
    tape = ctx.tape
    xv = pointwise(ctx, x, params.conv_v).node
    xq = pointwise(ctx, x, params.conv_q).node
    xk = pointwise(ctx, x, params.conv_k).node

    attended = []
    for rows in x.grid.segments:
        s = attention_map(ctx, tape.gather_rows(xq, rows), tape.gather_rows(xk, rows))
        if trace is not None:
            trace.append(s)
        attended.append(tape.matmul(s, tape.gather_rows(xv, rows)))
    mixed = attended[0] if len(attended) == 1 else tape.concat_rows(attended)

    xs = pointwise(ctx, ctx.wrap(x.grid, mixed), params.conv_out)
    return ctx.wrap(x.grid, tape.add(x.node, xs.node))
