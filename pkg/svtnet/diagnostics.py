"""
Per-voxel dumps for external visualization: ASVT attention and CSVT token
assignments of one cloud, in eval mode, on the voxels the branches see.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

from svtnet.config import ConfigError
from svtnet.layers import Context
from svtnet.model import ModelParams, forward, voxelize_batch
from svtnet.sparse_tensor import PointCloud


@dataclass
class AttentionDump:
    coords: np.ndarray  # (N, 3) branch-input voxel coordinates
    attention: np.ndarray  # (N, N) row-stochastic S
    features: np.ndarray  # (N, d) ASVT output features

    def write(self, out_dir: Path) -> List[Path]:
        """`voxels.txt` ("i j k" lines), `attention.npy` and `features.npy`."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        voxels = out_dir / "voxels.txt"
        np.savetxt(voxels, self.coords, fmt="%d")
        attention = out_dir / "attention.npy"
        np.save(attention, self.attention)
        features = out_dir / "features.npy"
        np.save(features, self.features)
        return [voxels, attention, features]


@dataclass
class TokenDump:
    coords: np.ndarray  # (N, 3)
    token_ids: np.ndarray  # (N,) argmax of the grouping map, lowest index on ties
    grouping: np.ndarray  # (N, L_t)

    def write(self, path: Path) -> Path:
        """One "i j k token_id" line per voxel."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, np.column_stack([self.coords, self.token_ids]), fmt="%d")
        return path


def dump_attention(params: ModelParams, pc: PointCloud) -> AttentionDump:
    """
    Raises:
        ConfigError: If the model has no ASVT branch
    """
    if params.asvt is None:
        raise ConfigError(f"variant '{params.config.variant}' has no ASVT branch")
    ctx = Context(mode="eval")
    result = forward(ctx, params, voxelize_batch([pc], params.config.quant_step), trace=True)
    return AttentionDump(
        coords=result.stem.grid.coords.copy(),
        attention=ctx.value(result.attention[0]).copy(),
        features=result.asvt.features.copy(),
    )


def dump_tokens(params: ModelParams, pc: PointCloud) -> TokenDump:
    """
    Raises:
        ConfigError: If the model has no CSVT branch
    """
    if params.csvt is None:
        raise ConfigError(f"variant '{params.config.variant}' has no CSVT branch")
    ctx = Context(mode="eval")
    result = forward(ctx, params, voxelize_batch([pc], params.config.quant_step), trace=True)
    grouping = ctx.value(result.csvt_trace["grouping"][0]).copy()
    return TokenDump(
        coords=result.stem.grid.coords.copy(),
        token_ids=np.argmax(grouping, axis=1),
        grouping=grouping,
    )
