"""
Differentiable sparse-voxel layers.

Parameters live in small dataclasses that form a named tree (ParamTree).
Layer functions run on a Context, which owns the tape, binds parameter arrays
to tape leaves once per forward pass, and carries the train/eval mode.
"""

import dataclasses
from dataclasses import dataclass
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np

from svtnet.autodiff import BatchNormStats, Tape
from svtnet.sparse_tensor import KernelMap, SparseVoxelGrid, build_kernel_map

Mode = Literal["train", "eval"]

GEM_CLAMP = 1e-6


class ParamTree:
    """
    Mixin for parameter dataclasses.

    Array fields are parameters unless listed in `_buffers`; nested ParamTree fields
    are walked recursively; None and plain scalars are skipped.
    """

    _buffers: Tuple[str, ...] = ()

    def _walk(self, prefix: str, buffers: bool) -> Iterator[Tuple[str, np.ndarray]]:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(value, ParamTree):
                yield from value._walk(f"{name}.", buffers)
            elif isinstance(value, np.ndarray):
                if (f.name in self._buffers) == buffers:
                    yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        return self._walk(prefix, buffers=False)

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        return self._walk(prefix, buffers=True)

    def num_parameters(self) -> int:
        return int(sum(arr.size for _, arr in self.named_parameters()))


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    """He/Kaiming uniform for ReLU networks: U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(eq=False)
class SPConvParams(ParamTree):
    """One C_in x C_out weight matrix per kernel offset, in kernel-map offset order."""

    weight: np.ndarray  # (K^3, C_in, C_out)
    kernel_size: int
    stride: int = 1
    bias: Optional[np.ndarray] = None  # (C_out,)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        kernel_size: int,
        in_channels: int,
        out_channels: int,
        stride: int = 1,
        bias: bool = False,
    ) -> "SPConvParams":
        volume = kernel_size**3
        weight = kaiming_uniform(rng, volume * in_channels, (volume, in_channels, out_channels))
        return cls(
            weight=weight,
            kernel_size=kernel_size,
            stride=stride,
            bias=np.zeros(out_channels) if bias else None,
        )


@dataclass(eq=False)
class BatchNormParams(ParamTree):
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    _buffers = ("running_mean", "running_var")

    @classmethod
    def init(cls, channels: int) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
        )

    @property
    def stats(self) -> BatchNormStats:
        # shares the arrays, so train-mode updates land in the parameter tree
        return BatchNormStats(self.running_mean, self.running_var)


@dataclass(eq=False)
class ConvBNParams(ParamTree):
    """An SP-Conv followed by batch-norm (+ ReLU when used through conv_bn_relu)."""

    conv: SPConvParams
    norm: BatchNormParams

    @classmethod
    def init(cls, rng, kernel_size, in_channels, out_channels, stride=1) -> "ConvBNParams":
        return cls(
            SPConvParams.init(rng, kernel_size, in_channels, out_channels, stride),
            BatchNormParams.init(out_channels),
        )


@dataclass(eq=False)
class ResBlockParams(ParamTree):
    conv1: SPConvParams
    norm1: BatchNormParams
    conv2: SPConvParams
    norm2: BatchNormParams
    skip: Optional[ConvBNParams] = None

    @classmethod
    def init(cls, rng, in_channels: int, out_channels: int) -> "ResBlockParams":
        return cls(
            conv1=SPConvParams.init(rng, 3, in_channels, out_channels),
            norm1=BatchNormParams.init(out_channels),
            conv2=SPConvParams.init(rng, 3, out_channels, out_channels),
            norm2=BatchNormParams.init(out_channels),
            skip=(
                ConvBNParams.init(rng, 1, in_channels, out_channels)
                if in_channels != out_channels
                else None
            ),
        )


@dataclass(eq=False)
class LinearParams(ParamTree):
    """Shared C_in -> C_out map applied to every row (a kernel-size-1 Conv1d on tokens)."""

    weight: np.ndarray  # (C_in, C_out)
    bias: Optional[np.ndarray] = None

    @classmethod
    def init(cls, rng, in_channels: int, out_channels: int, bias: bool = True) -> "LinearParams":
        return cls(
            kaiming_uniform(rng, in_channels, (in_channels, out_channels)),
            np.zeros(out_channels) if bias else None,
        )


@dataclass(eq=False)
class GeMParams(ParamTree):
    p: np.ndarray  # (1,)

    @classmethod
    def init(cls, p: float = 3.0) -> "GeMParams":
        return cls(np.array([p], dtype=np.float64))


@dataclass(frozen=True)
class GridNode:
    """A sparse grid whose feature matrix is node `node` of a tape."""

    grid: SparseVoxelGrid
    node: int

    @property
    def features(self) -> np.ndarray:
        return self.grid.features


class Context:
    """
    One forward pass: tape, parameter bindings, and mode.

    Parameter arrays are bound to tape leaves on first use, keyed by object
    identity, so every use of an array shares one leaf and its gradients sum.
    """

    def __init__(self, mode: Mode = "eval", tape: Optional[Tape] = None):
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode: {mode}")
        self.mode = mode
        self.tape = tape or Tape()
        self._bound: Dict[int, Tuple[int, np.ndarray]] = {}

    def param(self, array: np.ndarray) -> int:
        key = id(array)
        if key not in self._bound:
            self._bound[key] = (self.tape.leaf(array), array)
        return self._bound[key][0]

    def constant(self, value) -> int:
        return self.tape.constant(value)

    def input(self, grid: SparseVoxelGrid, requires_grad: bool = False) -> GridNode:
        node = self.tape.leaf(grid.features, requires_grad=requires_grad)
        return GridNode(grid, node)

    def wrap(self, grid: SparseVoxelGrid, node: int) -> GridNode:
        """Attach the node's current value to a grid layout."""
        return GridNode(grid.with_features(self.tape.value(node)), node)

    def value(self, node: int) -> np.ndarray:
        return self.tape.value(node)

    def gradients(self, loss: int, tree: ParamTree, prefix: str = "") -> Dict[str, np.ndarray]:
        """Backpropagate `loss` and collect gradients by parameter name, in parameter shape."""
        grads = self.tape.backward(loss)
        named = {}
        for name, array in tree.named_parameters(prefix):
            bound = self._bound.get(id(array))
            if bound is None:
                named[name] = np.zeros_like(array)
            else:
                named[name] = grads[bound[0]].reshape(array.shape)
        return named


def _check_channels(op: str, grid: SparseVoxelGrid, expected: int) -> None:
    if grid.channels != expected:
        raise ValueError(f"{op}: expected {expected} input channels, got {grid.channels}")


def linear(ctx: Context, x: int, params: LinearParams) -> int:
    """x @ W (+ b) on a plain feature node."""
    tape = ctx.tape
    out = tape.matmul(x, ctx.param(params.weight))
    if params.bias is not None:
        out = tape.add(out, ctx.param(params.bias))
    return out


def sp_conv(ctx: Context, x: GridNode, params: SPConvParams, km: KernelMap) -> GridNode:
    """
    Sparse convolution: per offset, gather input rows, multiply by that offset's
    weight, scatter-add into output rows; then add the bias.

    Raises:
        ValueError: On channel mismatch or a kernel map built for another grid
    """
    _check_channels("sp_conv", x.grid, params.in_channels)
    if km.kernel_size != params.kernel_size or km.stride != params.stride:
        raise ValueError(
            f"sp_conv: kernel map (K={km.kernel_size}, s={km.stride}) does not match "
            f"params (K={params.kernel_size}, s={params.stride})"
        )
    if not km.matches(x.grid):
        raise ValueError("sp_conv: kernel map was built for a different grid")

    tape = ctx.tape
    c_in, c_out = params.in_channels, params.out_channels
    weight = ctx.param(params.weight)

    if km.is_identity:
        out = tape.matmul(x.node, weight)
    else:
        contributions = []
        for k in range(km.offsets.shape[0]):
            in_idx, out_idx = km.in_maps[k], km.out_maps[k]
            if in_idx.size == 0:
                continue
            w_k = tape.gather_rows(weight, np.arange(k * c_in, (k + 1) * c_in))
            gathered = tape.gather_rows(x.node, in_idx)
            contributions.append(
                tape.scatter_add_rows(tape.matmul(gathered, w_k), out_idx, km.num_out)
            )
        if not contributions:
            out = tape.constant(np.zeros((km.num_out, c_out)))
        else:
            out = contributions[0]
            for part in contributions[1:]:
                out = tape.add(out, part)

    if params.bias is not None:
        out = tape.add(out, ctx.param(params.bias))

    layout = km.output_grid(tape.value(out), x.grid.quant_step)
    return GridNode(layout, out)


def batch_norm(ctx: Context, x: GridNode, norm: BatchNormParams) -> GridNode:
    _check_channels("batch_norm", x.grid, norm.gamma.shape[0])
    if x.grid.num_voxels == 0:
        raise ValueError("batch_norm: grid has no voxels")
    out = ctx.tape.batch_norm(
        x.node, ctx.param(norm.gamma), ctx.param(norm.beta), norm.stats, ctx.mode
    )
    return ctx.wrap(x.grid, out)


def bn_relu(ctx: Context, x: GridNode, norm: BatchNormParams) -> GridNode:
    """Batch-norm over voxel rows, affine, then ReLU; coordinates unchanged."""
    normed = batch_norm(ctx, x, norm)
    return ctx.wrap(x.grid, ctx.tape.relu(normed.node))


def conv_bn_relu(ctx: Context, x: GridNode, params: ConvBNParams, km: KernelMap) -> GridNode:
    return bn_relu(ctx, sp_conv(ctx, x, params.conv, km), params.norm)


def res_block(ctx: Context, x: GridNode, params: ResBlockParams, km: KernelMap) -> GridNode:
    """
    relu(bn(conv2(relu(bn(conv1(x))))) + skip(x)) with stride-1 3x3x3 convs.

    `km` must be the K=3, s=1 map of x; the skip projection (1x1 conv + bn) is
    applied only when channel counts differ.
    """
    _check_channels("res_block", x.grid, params.conv1.in_channels)
    h = bn_relu(ctx, sp_conv(ctx, x, params.conv1, km), params.norm1)
    h = batch_norm(ctx, sp_conv(ctx, h, params.conv2, km), params.norm2)

    if params.skip is None:
        skip = x.node
    else:
        identity = _identity_map(x.grid)
        skip = batch_norm(ctx, sp_conv(ctx, x, params.skip.conv, identity), params.skip.norm).node

    out = ctx.tape.relu(ctx.tape.add(h.node, skip))
    return ctx.wrap(x.grid, out)


def _identity_map(grid: SparseVoxelGrid) -> KernelMap:
    return build_kernel_map(grid, 1, 1)


def pointwise(ctx: Context, x: GridNode, params: SPConvParams) -> GridNode:
    """Kernel-size-1, stride-1 SP-Conv (a shared linear map on every voxel)."""
    if params.kernel_size != 1 or params.stride != 1:
        raise ValueError("pointwise expects a K=1, s=1 SP-Conv")
    return sp_conv(ctx, x, params, _identity_map(x.grid))


def gem_pool(
    ctx: Context,
    features: int,
    params: GeMParams,
    segments: Optional[Sequence[np.ndarray]] = None,
) -> int:
    """
    Generalized-mean pooling ((1/N) sum max(x, 1e-6)^p)^(1/p) per column.

    With `segments`, rows are pooled per cloud and the result is (B, d); otherwise
    all rows pool into one (1, d) descriptor.

    Raises:
        ValueError: If a pooled set is empty
    """
    tape = ctx.tape
    n, d = tape.value(features).shape
    if n == 0:
        raise ValueError("gem_pool: no rows to pool")
    p = ctx.param(params.p)
    powered = tape.power(tape.clamp_min(features, GEM_CLAMP), p)

    if segments is None:
        mean = tape.reduce_mean_rows(powered)
    else:
        counts = np.array([len(s) for s in segments], dtype=np.float64)
        if np.any(counts == 0):
            raise ValueError("gem_pool: a cloud has no rows to pool")
        owner = np.concatenate(
            [np.full(len(s), b, dtype=np.int64) for b, s in enumerate(segments)]
        )
        order = np.concatenate(segments)
        gathered = tape.gather_rows(powered, order)
        sums = tape.scatter_add_rows(gathered, owner, len(segments))
        inv_counts = ctx.constant(np.repeat((1.0 / counts)[:, None], d, axis=1))
        mean = tape.multiply(sums, inv_counts)

    return tape.power(mean, tape.reciprocal(p))
