"""
Sparse voxel tensors for svtnet.

Voxelizes point clouds into sparse grids and builds the coordinate kernel maps
that drive gather-matmul-scatter sparse convolution. Coordinates are kept as
int32 triples in canonical lexicographic order; lookups go through a sorted
array of packed 64-bit keys so that no dense volume is ever allocated.
"""

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

# Per-axis key width. Coordinates must satisfy -COORD_LIMIT <= c < COORD_LIMIT so that
# neighbour lookups (c + offset) stay inside one 16-bit field.
_AXIS_BITS = 16
_AXIS_BIAS = 1 << (_AXIS_BITS - 1)
COORD_LIMIT = 1 << 14
MAX_BATCH = 1 << 14


@dataclass(frozen=True)
class PointCloud:
    """Raw point cloud, an (N_p, 3) float64 array of x, y, z coordinates."""

    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.size == 0:
            points = points.reshape(0, 3)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"point cloud must be (N, 3), got shape {points.shape}")
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def from_file(cls, path: Path) -> "PointCloud":
        """
        Read a cloud file.

        `.bin` files are raw little-endian float64 (x, y, z) records with the point
        count inferred from the file size. Anything else is read as text with one
        "x y z" triple per line.

        Raises:
            FileNotFoundError: If the file does not exist
            ValueError: If a binary file size is not a multiple of 24 bytes
        """
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Point cloud file not found: {path}")

        if path.suffix == ".bin":
            raw = path.read_bytes()
            if len(raw) % 24 != 0:
                raise ValueError(
                    f"{path}: size {len(raw)} is not a multiple of 24 bytes (float64 xyz records)"
                )
            return cls(np.frombuffer(raw, dtype="<f8").reshape(-1, 3).copy())

        return cls(np.loadtxt(path, dtype=np.float64, ndmin=2))

    def to_file(self, path: Path) -> Path:
        """Write the cloud as `.bin` (binary) or text, chosen by suffix."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix == ".bin":
            path.write_bytes(self.points.astype("<f8").tobytes())
        else:
            np.savetxt(path, self.points, fmt="%.17g")
        return path


@dataclass(frozen=True, eq=False)
class SparseVoxelGrid:
    """
    Sorted unique voxel coordinates with one feature row per voxel.

    Several clouds may share one grid (a collated batch); `batch` holds the cloud
    index of every row and rows are sorted by (batch, i, j, k). Coordinates are in
    units of the finest lattice, so a grid at stride s only holds multiples of s.
    """

    coords: np.ndarray
    features: np.ndarray
    stride: int = 1
    quant_step: float = 1.0
    batch: Optional[np.ndarray] = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int32).reshape(-1, 3)
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise ValueError(
                f"features shape {features.shape} does not match {coords.shape[0]} coordinates"
            )
        batch = self.batch
        batch = (
            np.zeros(coords.shape[0], dtype=np.int32)
            if batch is None
            else np.asarray(batch, dtype=np.int32).reshape(-1)
        )
        if batch.shape[0] != coords.shape[0]:
            raise ValueError("batch index length does not match coordinate count")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "batch", batch)

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def batch_size(self) -> int:
        return int(self.batch.max()) + 1 if self.num_voxels else 0

    @cached_property
    def keys(self) -> np.ndarray:
        """Packed sort keys; ascending because rows are canonical."""
        return pack_keys(self.coords, self.batch)

    @cached_property
    def segments(self) -> List[np.ndarray]:
        """Row indices of every cloud in the batch, in batch order."""
        bounds = np.searchsorted(self.batch, np.arange(self.batch_size + 1))
        return [np.arange(bounds[b], bounds[b + 1]) for b in range(self.batch_size)]

    def with_features(self, features: np.ndarray) -> "SparseVoxelGrid":
        return SparseVoxelGrid(self.coords, features, self.stride, self.quant_step, self.batch)

    def voxel_centers(self) -> np.ndarray:
        """Metric centers of the voxels at the finest lattice."""
        return (self.coords.astype(np.float64) + 0.5) * self.quant_step

    def index_of(self, coord: Sequence[int], batch: int = 0) -> int:
        """Row index of a coordinate, or -1 if the voxel is empty."""
        key = pack_keys(np.asarray([coord], dtype=np.int32), np.asarray([batch]))[0]
        pos = int(np.searchsorted(self.keys, key))
        if pos < self.num_voxels and self.keys[pos] == key:
            return pos
        return -1

    def translate(self, t: Sequence[int]) -> "SparseVoxelGrid":
        """Shift every coordinate by an integer lattice vector (order is preserved)."""
        shifted = self.coords + np.asarray(t, dtype=np.int32).reshape(1, 3)
        return SparseVoxelGrid(shifted, self.features, self.stride, self.quant_step, self.batch)

    def __repr__(self) -> str:
        return (
            f"SparseVoxelGrid(N={self.num_voxels}, C={self.channels}, stride={self.stride}, "
            f"batch_size={self.batch_size})"
        )


@dataclass(frozen=True, eq=False)
class KernelMap:
    """
    Per-offset (input row, output row) pairs realizing one sparse convolution.

    `in_maps[k]` and `out_maps[k]` are equal-length index arrays for offset k;
    offsets are enumerated in lexicographic (x, y, z) order.
    """

    offsets: np.ndarray
    in_maps: List[np.ndarray]
    out_maps: List[np.ndarray]
    out_coords: np.ndarray
    out_batch: np.ndarray
    kernel_size: int
    stride: int
    in_stride: int
    num_in: int
    in_keys: np.ndarray = field(repr=False)

    @property
    def num_out(self) -> int:
        return self.out_coords.shape[0]

    @property
    def out_stride(self) -> int:
        return self.in_stride * self.stride

    @property
    def total_pairs(self) -> int:
        return int(sum(m.shape[0] for m in self.in_maps))

    @property
    def is_identity(self) -> bool:
        """True for K=1, s=1 maps, where every voxel maps onto itself."""
        return self.kernel_size == 1 and self.stride == 1

    def pairs(self, k: int) -> List[Tuple[int, int]]:
        return list(zip(self.in_maps[k].tolist(), self.out_maps[k].tolist()))

    def matches(self, grid: SparseVoxelGrid) -> bool:
        return (
            grid.num_voxels == self.num_in
            and grid.stride == self.in_stride
            and np.array_equal(grid.keys, self.in_keys)
        )

    def output_grid(self, features: np.ndarray, quant_step: float) -> SparseVoxelGrid:
        return SparseVoxelGrid(
            self.out_coords, features, self.out_stride, quant_step, self.out_batch
        )


def pack_keys(coords: np.ndarray, batch: np.ndarray) -> np.ndarray:
    """
    Pack (batch, i, j, k) rows into order-preserving int64 keys.

    Raises:
        ValueError: If a coordinate or batch index is outside the packable range
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    batch = np.asarray(batch, dtype=np.int64).reshape(-1)
    if coords.size and (coords.min() < -COORD_LIMIT or coords.max() >= COORD_LIMIT):
        raise ValueError(f"voxel coordinate outside [-{COORD_LIMIT}, {COORD_LIMIT})")
    if batch.size and (batch.min() < 0 or batch.max() >= MAX_BATCH):
        raise ValueError(f"batch index outside [0, {MAX_BATCH})")
    shifted = coords + _AXIS_BIAS
    return (
        (batch << (3 * _AXIS_BITS))
        | (shifted[:, 0] << (2 * _AXIS_BITS))
        | (shifted[:, 1] << _AXIS_BITS)
        | shifted[:, 2]
    )


def _offset_delta(offset: np.ndarray) -> np.int64:
    """Key increment for a lattice offset; valid while fields do not overflow."""
    o = np.asarray(offset, dtype=np.int64)
    return np.int64((o[0] << (2 * _AXIS_BITS)) + (o[1] << _AXIS_BITS) + o[2])


def _sort_unique(
    coords: np.ndarray, batch: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Canonical order + dedupe. Returns (coords, batch, inverse) with inverse mapping rows."""
    keys = pack_keys(coords, batch)
    uniq, inverse = np.unique(keys, return_inverse=True)
    first = np.zeros(uniq.shape[0], dtype=np.int64)
    # any representative works; all rows with one key share coords
    first[inverse[::-1]] = np.arange(keys.shape[0] - 1, -1, -1)
    return coords[first].astype(np.int32), batch[first].astype(np.int32), inverse


def voxelize(pc: PointCloud, step: float) -> SparseVoxelGrid:
    """
    Quantize a point cloud into an occupancy grid.

    Coordinates are floor(p / step); duplicates merge into one voxel whose feature
    is 1.0 (occupancy, not a count).

    Raises:
        ValueError: "empty point cloud", "invalid coordinate", or non-positive step
    """
    if step <= 0:
        raise ValueError(f"quantization step must be > 0, got {step}")
    points = pc.points
    if points.shape[0] == 0:
        raise ValueError("empty point cloud")
    if not np.all(np.isfinite(points)):
        raise ValueError("invalid coordinate")

    quantized = np.floor(points / step).astype(np.int64)
    coords, batch, _ = _sort_unique(quantized, np.zeros(quantized.shape[0], dtype=np.int64))
    features = np.ones((coords.shape[0], 1), dtype=np.float64)
    return SparseVoxelGrid(coords, features, stride=1, quant_step=step, batch=batch)


def collate(grids: Sequence[SparseVoxelGrid]) -> SparseVoxelGrid:
    """Stack single-cloud grids into one batched grid (cloud b gets batch index b)."""
    if not grids:
        raise ValueError("cannot collate an empty list of grids")
    strides = {g.stride for g in grids}
    if len(strides) != 1:
        raise ValueError(f"cannot collate grids with different strides: {sorted(strides)}")
    coords = np.concatenate([g.coords for g in grids])
    features = np.concatenate([g.features for g in grids])
    batch = np.concatenate(
        [np.full(g.num_voxels, b, dtype=np.int32) for b, g in enumerate(grids)]
    )
    return SparseVoxelGrid(coords, features, grids[0].stride, grids[0].quant_step, batch)


def downsample_coords(coords: np.ndarray, s: int, batch: Optional[np.ndarray] = None):
    """
    Snap coordinates to the s-lattice: sorted unique s * floor(c / s).

    Returns the coordinates, or (coords, batch) when a batch index is given.
    """
    if s < 1:
        raise ValueError(f"downsampling factor must be >= 1, got {s}")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    snapped = np.floor_divide(coords, s) * s
    b = np.zeros(coords.shape[0], dtype=np.int64) if batch is None else np.asarray(batch)
    out, out_batch, _ = _sort_unique(snapped, b)
    if batch is None:
        return out
    return out, out_batch


def kernel_offsets(kernel_size: int) -> np.ndarray:
    """
    Offsets of a K^3 kernel in lexicographic order.

    Odd kernels are centered; even kernels are forward-shifted to {0..K-1}^3 so a
    K=2, s=2 kernel partitions its inputs.
    """
    if kernel_size < 1:
        raise ValueError(f"kernel size must be >= 1, got {kernel_size}")
    if kernel_size % 2 == 1:
        half = (kernel_size - 1) // 2
        axis = range(-half, half + 1)
    else:
        axis = range(kernel_size)
    return np.array(list(itertools.product(axis, repeat=3)), dtype=np.int32)


def build_kernel_map(in_grid: SparseVoxelGrid, K: int, s: int) -> KernelMap:
    """
    Build the per-offset pair lists of a sparse convolution.

    Output coordinates are the input coordinates snapped to the coarser lattice.
    For output o and offset d the input o + d * in_stride pairs with o whenever that
    voxel is occupied in the same cloud.
    """
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {s}")
    offsets = kernel_offsets(K)
    in_stride = in_grid.stride

    if s == 1:
        out_coords, out_batch = in_grid.coords, in_grid.batch
        out_keys = in_grid.keys
    else:
        out_coords, out_batch = downsample_coords(
            in_grid.coords, s * in_stride, batch=in_grid.batch
        )
        out_keys = pack_keys(out_coords, out_batch)

    in_keys = in_grid.keys
    n_in = in_keys.shape[0]
    in_maps: List[np.ndarray] = []
    out_maps: List[np.ndarray] = []
    for offset in offsets:
        query = out_keys + _offset_delta(offset * in_stride)
        pos = np.searchsorted(in_keys, query)
        found = pos < n_in
        found[found] = in_keys[pos[found]] == query[found]
        in_maps.append(pos[found].astype(np.int64))
        out_maps.append(np.nonzero(found)[0].astype(np.int64))

    return KernelMap(
        offsets=offsets,
        in_maps=in_maps,
        out_maps=out_maps,
        out_coords=np.asarray(out_coords, dtype=np.int32),
        out_batch=np.asarray(out_batch, dtype=np.int32),
        kernel_size=K,
        stride=s,
        in_stride=in_stride,
        num_in=n_in,
        in_keys=in_keys,
    )
