"""
SVT-Net assembly.

Stem (conv0, two strided SP-Conv + residual stages, conv1x1), then the ASVT
and/or CSVT branch on the same voxels, fusion, and GeM pooling into one global
descriptor per cloud. Also owns per-block parameter counting.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from svtnet.asvt import ASVTParams, asvt_forward
from svtnet.config import ConfigError, ModelConfig
from svtnet.csvt import CSVTParams, csvt_forward
from svtnet.layers import (
    BatchNormParams,
    Context,
    ConvBNParams,
    GeMParams,
    GridNode,
    ParamTree,
    ResBlockParams,
    SPConvParams,
    batch_norm,
    conv_bn_relu,
    gem_pool,
    pointwise,
    res_block,
)
from svtnet.sparse_tensor import PointCloud, SparseVoxelGrid, build_kernel_map, collate, voxelize
from svtnet.utils import rng_stream

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class ModelParams(ParamTree):
    """Named parameter tree of SVT-Net or one of its single-branch variants."""

    config: ModelConfig
    conv0: ConvBNParams
    convs0: ConvBNParams
    resblock0: ResBlockParams
    convs1: ConvBNParams
    resblock1: ResBlockParams
    conv1x1: SPConvParams
    gem: GeMParams
    conv1x1_norm: Optional[BatchNormParams] = None
    asvt: Optional[ASVTParams] = None
    csvt: Optional[CSVTParams] = None
    fusion: Optional[SPConvParams] = None

    def blocks(self) -> Dict[str, ParamTree]:
        """Blocks in network order, named as in the published parameter table."""
        table: Dict[str, ParamTree] = {
            "conv0": self.conv0,
            "convs[0]": self.convs0,
            "resblocks[0]": self.resblock0,
            "convs[1]": self.convs1,
            "resblocks[1]": self.resblock1,
            "conv1x1": self.conv1x1,
        }
        if self.conv1x1_norm is not None:
            table["conv1x1.norm"] = self.conv1x1_norm
        if self.asvt is not None:
            table["asvtblocks"] = self.asvt
        if self.csvt is not None:
            table["csvtblocks"] = self.csvt
        if self.fusion is not None:
            table["fusion"] = self.fusion
        table["GeM Pool"] = self.gem
        return table

    def state(self) -> Dict[str, np.ndarray]:
        """Every parameter and buffer by dotted name."""
        return {**dict(self.named_parameters()), **dict(self.named_buffers())}


@dataclass
class ParamCount:
    blocks: Dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.blocks.values())


@dataclass
class ForwardResult:
    """Descriptor node plus the intermediate grids a diagnostic may want."""

    descriptors: int
    stem: GridNode
    fused: GridNode
    asvt: Optional[GridNode] = None
    csvt: Optional[GridNode] = None
    attention: List[int] = field(default_factory=list)
    csvt_trace: Dict[str, List[int]] = field(default_factory=dict)


def build(config: ModelConfig, seed: int = 0) -> ModelParams:
    """
    Initialize a model deterministically from a seed.

    Conv weights are Kaiming-uniform over fan-in; biases and beta are zero, gamma
    is one, and GeM's p starts at 3.0.

    Raises:
        ConfigError: If the configuration is invalid
    """
    config.validate()
    rng = rng_stream(seed, "init")
    c1, c2 = config.stem_channels
    d = config.descriptor_dim

    params = ModelParams(
        config=config,
        conv0=ConvBNParams.init(rng, 5, 1, c1),
        convs0=ConvBNParams.init(rng, 2, c1, c1, stride=2),
        resblock0=ResBlockParams.init(rng, c1, c1),
        convs1=ConvBNParams.init(rng, 2, c1, c1, stride=2),
        resblock1=ResBlockParams.init(rng, c1, c2),
        conv1x1=SPConvParams.init(rng, 1, c2, d),
        gem=GeMParams.init(3.0),
    )
    if config.conv1x1_norm:
        params.conv1x1_norm = BatchNormParams.init(d)
    if config.has_asvt:
        params.asvt = ASVTParams.init(rng, d, config.reduction)
    if config.has_csvt:
        params.csvt = CSVTParams.init(rng, d, config.token_count, config.token_softmax_axis)
    if config.variant == "svt" and config.fusion == "concat_conv":
        params.fusion = SPConvParams.init(rng, 1, 2 * d, d, bias=True)

    logger.debug(
        "Built model",
        extra={
            "event": "model_built",
            "metadata": {"variant": config.variant, "parameters": params.num_parameters()},
        },
    )
    return params


def count_params(params: ModelParams) -> ParamCount:
    """Exact parameter counts per named block (buffers excluded)."""
    return ParamCount({name: block.num_parameters() for name, block in params.blocks().items()})


def _stem(ctx: Context, params: ModelParams, x: GridNode) -> GridNode:
    x = conv_bn_relu(ctx, x, params.conv0, build_kernel_map(x.grid, 5, 1))
    x = conv_bn_relu(ctx, x, params.convs0, build_kernel_map(x.grid, 2, 2))
    x = res_block(ctx, x, params.resblock0, build_kernel_map(x.grid, 3, 1))
    x = conv_bn_relu(ctx, x, params.convs1, build_kernel_map(x.grid, 2, 2))
    x = res_block(ctx, x, params.resblock1, build_kernel_map(x.grid, 3, 1))
    x = pointwise(ctx, x, params.conv1x1)
    if params.conv1x1_norm is not None:
        x = batch_norm(ctx, x, params.conv1x1_norm)
    return x


def forward(
    ctx: Context,
    params: ModelParams,
    grid: SparseVoxelGrid,
    trace: bool = False,
) -> ForwardResult:
    """
    Run the network on a (possibly batched) occupancy grid.

    Returns:
        ForwardResult whose `descriptors` node is (B, output_dim)

    Raises:
        ValueError: "scene too small" if a cloud has no voxels left to pool
    """
    x = ctx.input(grid)
    stem = _stem(ctx, params, x)
    segments = stem.grid.segments
    if len(segments) != grid.batch_size or any(len(s) == 0 for s in segments):
        raise ValueError("scene too small")

    result = ForwardResult(descriptors=-1, stem=stem, fused=stem)
    tape = ctx.tape
    if params.asvt is not None:
        attention = result.attention if trace else None
        result.asvt = asvt_forward(ctx, stem, params.asvt, trace=attention)
    if params.csvt is not None:
        csvt_trace = result.csvt_trace if trace else None
        result.csvt = csvt_forward(ctx, stem, params.csvt, trace=csvt_trace)

    if result.asvt is not None and result.csvt is not None:
        fusion = params.config.fusion
        if fusion == "add":
            fused = tape.add(result.asvt.node, result.csvt.node)
        else:
            fused = tape.concat_cols([result.asvt.node, result.csvt.node])
        result.fused = ctx.wrap(stem.grid, fused)
        if fusion == "concat_conv":
            result.fused = pointwise(ctx, result.fused, params.fusion)
    else:
        result.fused = result.asvt or result.csvt

    result.descriptors = gem_pool(ctx, result.fused.node, params.gem, segments=segments)
    return result


def voxelize_batch(clouds: Sequence[PointCloud], quant_step: float) -> SparseVoxelGrid:
    return collate([voxelize(pc, quant_step) for pc in clouds])


def embed_batch(params: ModelParams, clouds: Sequence[PointCloud]) -> np.ndarray:
    """Eval-mode descriptors of several clouds as a (B, output_dim) matrix."""
    ctx = Context(mode="eval")
    result = forward(ctx, params, voxelize_batch(clouds, params.config.quant_step))
    return ctx.value(result.descriptors).copy()


def embed(params: ModelParams, pc: PointCloud) -> np.ndarray:
    """Eval-mode global descriptor of one cloud (not normalized)."""
    return embed_batch(params, [pc])[0]


def check_compatible(found: ModelConfig, config: ModelConfig) -> None:
    """
    Check that a stored model config (`found`) matches the configured network shape.

    Raises:
        ConfigError: "variant mismatch" if `found` describes another network shape
    """
    if found.variant != config.variant:
        raise ConfigError(
            f"variant mismatch: checkpoint is '{found.variant}', "
            f"config is '{config.variant}'"
        )
    if found.descriptor_dim != config.descriptor_dim:
        raise ConfigError(
            f"descriptor dim mismatch: checkpoint {found.descriptor_dim}, "
            f"config {config.descriptor_dim}"
        )
