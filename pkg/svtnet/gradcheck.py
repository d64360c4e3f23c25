"""
Finite-difference gradient suite behind `svtnet check-grads`.

Three tiers, each with its own tolerance on the max relative error:
primitive ops (1e-5), layers (1e-4) and a tiny full model (1e-3).
Every check builds a scalar objective sum(out * R) with a fixed random R so
that all output entries contribute. Layer and model checks run in eval mode
against randomized running statistics, the path `embed` takes; batch norm is
checked in train mode as well.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from svtnet.asvt import ASVTParams, asvt_forward
from svtnet.autodiff import OPS, BatchNormStats, Tape, grad_check, tape_objective
from svtnet.config import ModelConfig
from svtnet.csvt import CSVTParams, csvt_forward
from svtnet.layers import (
    BatchNormParams,
    Context,
    GeMParams,
    ParamTree,
    ResBlockParams,
    SPConvParams,
    batch_norm,
    gem_pool,
    res_block,
    sp_conv,
)
from svtnet.model import ModelParams, build, forward
from svtnet.sparse_tensor import PointCloud, SparseVoxelGrid, build_kernel_map, collate, voxelize
from svtnet.training.loss import pair_labels, triplet_loss_batch_hard
from svtnet.utils import rng_stream

logger = logging.getLogger(__name__)

OP_TOLERANCE = 1e-5
LAYER_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


@dataclass
class GradCheckResult:
    tier: str
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error < self.tolerance


def _weighted_sum(tape: Tape, node: int, rng: np.random.Generator) -> int:
    weights = tape.constant(rng.normal(size=tape.value(node).shape))
    return tape.sum_all(tape.multiply(node, weights))


def _away_from_zero(rng: np.random.Generator, shape, low: float = 0.2) -> np.ndarray:
    """Random entries with |x| >= low, so kinks at 0 are out of finite-difference reach."""
    return rng.uniform(low, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _op_cases(rng: np.random.Generator) -> Dict[str, Tuple[List[np.ndarray], Callable]]:
    """Inputs and a builder per registered primitive."""
    idx = np.array([2, 0, 2, 1])
    return {
        "matmul": ([rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], lambda t, x: t.matmul(*x)),
        "transpose": ([rng.normal(size=(3, 4))], lambda t, x: t.transpose(x[0])),
        "add": ([rng.normal(size=(3, 4)), rng.normal(size=(1, 4))], lambda t, x: t.add(*x)),
        "subtract": (
            [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))],
            lambda t, x: t.subtract(*x),
        ),
        "multiply": (
            [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))],
            lambda t, x: t.multiply(*x),
        ),
        "scale": ([rng.normal(size=(3, 4))], lambda t, x: t.scale(x[0], -1.7)),
        "row_softmax": ([rng.normal(size=(3, 5))], lambda t, x: t.row_softmax(x[0])),
        "relu": ([_away_from_zero(rng, (3, 4))], lambda t, x: t.relu(x[0])),
        "clamp_min": ([_away_from_zero(rng, (3, 4))], lambda t, x: t.clamp_min(x[0], 0.0)),
        "power": (
            [rng.uniform(0.5, 2.0, size=(3, 4)), np.array([[2.5]])],
            lambda t, x: t.power(*x),
        ),
        "reciprocal": ([rng.uniform(0.5, 2.0, size=(3, 4))], lambda t, x: t.reciprocal(x[0])),
        "gather_rows": ([rng.normal(size=(3, 4))], lambda t, x: t.gather_rows(x[0], idx)),
        "scatter_add_rows": (
            [rng.normal(size=(4, 3))],
            lambda t, x: t.scatter_add_rows(x[0], idx, 5),
        ),
        "reduce_mean_rows": ([rng.normal(size=(5, 3))], lambda t, x: t.reduce_mean_rows(x[0])),
        "sum_all": ([rng.normal(size=(3, 4))], lambda t, x: t.sum_all(x[0])),
        "row_l2norm": ([rng.normal(size=(4, 3))], lambda t, x: t.row_l2norm(x[0])),
        "concat_rows": (
            [rng.normal(size=(2, 3)), rng.normal(size=(3, 3))],
            lambda t, x: t.concat_rows(x),
        ),
        "concat_cols": (
            [rng.normal(size=(3, 2)), rng.normal(size=(3, 1))],
            lambda t, x: t.concat_cols(x),
        ),
        "batch_norm": (
            [rng.normal(size=(6, 3)), rng.uniform(0.5, 1.5, size=(1, 3)), rng.normal(size=(1, 3))],
            lambda t, x: t.batch_norm(
                *x, stats=BatchNormStats(np.zeros(3), np.ones(3)), mode="train"
            ),
        ),
    }


def check_ops(seed: int = 0) -> List[GradCheckResult]:
    """Every registered primitive against central differences."""
    results = []
    cases = _op_cases(rng_stream(seed, "gradcheck", 0))
    missing = sorted(set(OPS) - set(cases))
    if missing:
        raise KeyError(f"no gradient case for op(s): {', '.join(missing)}")

    weights_seed = int(rng_stream(seed, "gradcheck", 1).integers(2**31))
    for name, (inputs, body) in cases.items():

        def build_loss(tape: Tape, leaves: List[int], body=body) -> int:
            return _weighted_sum(tape, body(tape, leaves), np.random.default_rng(weights_seed))

        objective = tape_objective(build_loss, [x.shape for x in inputs])
        theta = np.concatenate([x.reshape(-1) for x in inputs])
        results.append(GradCheckResult("op", name, grad_check(objective, theta), OP_TOLERANCE))
    return results


def param_objective(
    tree: ParamTree,
    build_loss: Callable[[Context], int],
    mode: str = "eval",
) -> Tuple[Callable[[np.ndarray], Tuple[float, np.ndarray]], np.ndarray, List[str]]:
    """
    Flat-vector objective over all parameters of `tree`.

    theta is written into the parameter arrays in place before each evaluation.

    Returns:
        (objective, starting theta, parameter name per component)
    """
    named = list(tree.named_parameters())
    theta0 = np.concatenate([a.reshape(-1) for _, a in named])
    owners = [name for name, a in named for _ in range(a.size)]

    def objective(theta: np.ndarray) -> Tuple[float, np.ndarray]:
        offset = 0
        for _, array in named:
            array[...] = theta[offset : offset + array.size].reshape(array.shape)
            offset += array.size
        ctx = Context(mode=mode)
        loss = build_loss(ctx)
        grads = ctx.gradients(loss, tree)
        flat = np.concatenate([grads[name].reshape(-1) for name, _ in named])
        return float(ctx.value(loss)[0, 0]), flat

    return objective, theta0, owners


def randomize_running_stats(tree: ParamTree, rng: np.random.Generator) -> None:
    """Give every batch-norm buffer non-trivial values so eval-mode norms are not identities."""
    for name, buffer in tree.named_buffers():
        if name.endswith("running_var"):
            buffer[...] = rng.uniform(0.5, 1.5, size=buffer.shape)
        else:
            buffer[...] = 0.2 * rng.normal(size=buffer.shape)


def sample_components(owners: List[str], per_tensor: int, rng: np.random.Generator) -> List[int]:
    """Up to `per_tensor` component indices from every named parameter tensor."""
    picked: List[int] = []
    start = 0
    while start < len(owners):
        end = start
        while end < len(owners) and owners[end] == owners[start]:
            end += 1
        count = min(per_tensor, end - start)
        chosen = rng.choice(np.arange(start, end), count, replace=False)
        picked.extend(sorted(int(i) for i in chosen))
        start = end
    return picked


def _small_grid(
    rng: np.random.Generator, channels: int, n: int = 12, extent: int = 4
) -> SparseVoxelGrid:
    cells = rng.choice(extent**3, size=n, replace=False)
    coords = np.stack(np.unravel_index(np.sort(cells), (extent,) * 3), axis=1)
    return SparseVoxelGrid(coords, rng.normal(size=(n, channels)))


def _two_cloud_grid(rng: np.random.Generator, channels: int) -> SparseVoxelGrid:
    grids = [_small_grid(rng, channels, n=8, extent=3) for _ in range(2)]
    return collate(grids)


def _layer_check(
    name: str,
    tree: ParamTree,
    body: Callable[[Context], int],
    seed: int,
    mode: str = "eval",
) -> GradCheckResult:
    weights_seed = int(rng_stream(seed, "gradcheck", 2).integers(2**31))

    def build_loss(ctx: Context) -> int:
        return _weighted_sum(ctx.tape, body(ctx), np.random.default_rng(weights_seed))

    objective, theta, _ = param_objective(tree, build_loss, mode=mode)
    return GradCheckResult("layer", name, grad_check(objective, theta), LAYER_TOLERANCE)


def check_layers(seed: int = 0) -> List[GradCheckResult]:
    """SP-Conv, batch norm, residual block, ASVT, CSVT, GeM and the triplet loss."""
    rng = rng_stream(seed, "gradcheck", 3)
    results = []

    grid = _small_grid(rng, 3)
    conv = SPConvParams.init(rng, 3, 3, 4, bias=True)
    conv.bias[...] = rng.normal(size=4)
    km3 = build_kernel_map(grid, 3, 1)
    results.append(
        _layer_check("sp_conv K3", conv, lambda c: sp_conv(c, c.input(grid), conv, km3).node, seed)
    )

    strided = SPConvParams.init(rng, 2, 3, 2, stride=2)
    km2 = build_kernel_map(grid, 2, 2)
    results.append(
        _layer_check(
            "sp_conv K2 s2", strided, lambda c: sp_conv(c, c.input(grid), strided, km2).node, seed
        )
    )

    norm = BatchNormParams.init(3)
    norm.gamma[...] = rng.uniform(0.5, 1.5, size=3)
    randomize_running_stats(norm, rng)
    results.append(
        _layer_check("batch_norm", norm, lambda c: batch_norm(c, c.input(grid), norm).node, seed)
    )
    results.append(
        _layer_check(
            "batch_norm (train)",
            norm,
            lambda c: batch_norm(c, c.input(grid), norm).node,
            seed,
            mode="train",
        )
    )

    block = ResBlockParams.init(rng, 3, 4)
    randomize_running_stats(block, rng)
    results.append(
        _layer_check(
            "res_block", block, lambda c: res_block(c, c.input(grid), block, km3).node, seed
        )
    )

    batched = _two_cloud_grid(rng, 8)
    asvt = ASVTParams.init(rng, 8, reduction=4)
    for sub in (asvt.conv_v, asvt.conv_q, asvt.conv_k, asvt.conv_out):
        sub.bias[...] = 0.1 * rng.normal(size=sub.bias.shape)
    results.append(
        _layer_check("asvt", asvt, lambda c: asvt_forward(c, c.input(batched), asvt).node, seed)
    )

    for axis in ("tokens", "voxels"):
        csvt = CSVTParams.init(rng, 8, token_count=3, softmax_axis=axis)
        results.append(
            _layer_check(
                f"csvt ({axis} softmax)",
                csvt,
                lambda c, p=csvt: csvt_forward(c, c.input(batched), p).node,
                seed,
            )
        )

    positive = batched.with_features(rng.uniform(0.1, 1.0, size=(batched.num_voxels, 8)))
    gem = GeMParams.init(3.0)
    results.append(
        _layer_check(
            "gem_pool",
            gem,
            lambda c: gem_pool(c, c.input(positive).node, gem, segments=positive.segments),
            seed,
        )
    )

    results.append(_check_triplet_loss(rng))
    return results


def _check_triplet_loss(rng: np.random.Generator) -> GradCheckResult:
    """Descriptor gradient of the batch-hard loss on B = 4, d = 3."""
    positions = np.array([[0.0, 0.0], [2.0, 0.0], [100.0, 0.0], [102.0, 0.0]])
    labels = pair_labels(positions)
    descriptors = rng.normal(size=(4, 3))

    def build_loss(tape: Tape, leaves: List[int]) -> int:
        loss, _ = triplet_loss_batch_hard(tape, leaves[0], labels, margin=5.0)
        return loss

    objective = tape_objective(build_loss, [descriptors.shape])
    error = grad_check(objective, descriptors.reshape(-1))
    return GradCheckResult("layer", "triplet_loss", error, LAYER_TOLERANCE)


TINY_MODEL = dict(descriptor_dim=16, token_count=2, reduction=4, stem_channels=(4, 8))


def tiny_model(seed: int = 0, variant: str = "svt") -> ModelParams:
    return build(ModelConfig(variant=variant, quant_step=1.0, **TINY_MODEL), seed)


def tiny_clouds(seed: int = 0) -> List[PointCloud]:
    """Two clouds of at most 10 unit voxels each, spread so strided layers keep several rows."""
    rng = rng_stream(seed, "gradcheck", 4)
    clouds = []
    for _ in range(2):
        cells = rng.choice(12**3, size=10, replace=False)
        coords = np.stack(np.unravel_index(cells, (12,) * 3), axis=1).astype(np.float64)
        clouds.append(PointCloud(coords + 0.5))
    return clouds


def check_model(
    seed: int = 0, variant: str = "svt", per_tensor: Optional[int] = 3
) -> GradCheckResult:
    """
    Full eval-mode forward pass of a tiny model with randomized running stats,
    checked on `per_tensor` components of every parameter tensor (all if None).
    """
    params = tiny_model(seed, variant)
    randomize_running_stats(params, rng_stream(seed, "gradcheck", 7))
    grid = collate([voxelize(pc, 1.0) for pc in tiny_clouds(seed)])
    weights_seed = int(rng_stream(seed, "gradcheck", 5).integers(2**31))

    def build_loss(ctx: Context) -> int:
        out = forward(ctx, params, grid)
        return _weighted_sum(ctx.tape, out.descriptors, np.random.default_rng(weights_seed))

    objective, theta, owners = param_objective(params, build_loss)
    components = (
        None
        if per_tensor is None
        else sample_components(owners, per_tensor, rng_stream(seed, "gradcheck", 6))
    )
    error = grad_check(objective, theta, components=components)
    return GradCheckResult("model", f"tiny {variant}", error, MODEL_TOLERANCE)


def run_suite(seed: int = 0, tiny: bool = True) -> List[GradCheckResult]:
    """All op and layer checks, plus the tiny-model check when `tiny` is set."""
    results = check_ops(seed) + check_layers(seed)
    if tiny:
        results.append(check_model(seed))
    failed = [r.name for r in results if not r.passed]
    logger.info(
        f"Gradient suite: {len(results) - len(failed)}/{len(results)} passed",
        extra={"event": "gradcheck_finished", "metadata": {"failed": failed}},
    )
    return results
