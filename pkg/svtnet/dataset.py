"""
Dataset index and synthetic scene generation.

An index is a CSV file with columns `path,northing,easting,split,run`; relative
cloud paths are resolved against the index file's directory.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import pandas as pd

from svtnet.config import SynthConfig
from svtnet.sparse_tensor import PointCloud
from svtnet.utils import rng_stream

logger = logging.getLogger(__name__)

INDEX_COLUMNS = ["path", "northing", "easting", "split", "run"]
SPLITS = ("train", "test")
INDEX_FILE = "index.csv"

Sampler = Callable[[np.random.Generator, int], np.ndarray]


class DatasetError(ValueError):
    """Dataset index or dataset directory is invalid."""
    pass


@dataclass(frozen=True)
class IndexRow:
    path: str
    northing: float
    easting: float
    split: str
    run: str

    @property
    def position(self) -> np.ndarray:
        return np.array([self.northing, self.easting])


@dataclass
class DatasetIndex:
    """Rows of (cloud path, position, split, run) plus the directory paths are relative to."""

    rows: List[IndexRow]
    root: Path

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def positions(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, 2))
        return np.array([[r.northing, r.easting] for r in self.rows], dtype=np.float64)

    @property
    def ids(self) -> List[str]:
        return [r.path for r in self.rows]

    def split(self, name: str) -> "DatasetIndex":
        if name not in SPLITS:
            raise DatasetError(f"unknown split '{name}' (expected one of {SPLITS})")
        return DatasetIndex([r for r in self.rows if r.split == name], self.root)

    def cloud_path(self, i: int) -> Path:
        path = Path(self.rows[i].path)
        return path if path.is_absolute() else self.root / path

    def load_cloud(self, i: int) -> PointCloud:
        return PointCloud.from_file(self.cloud_path(i))

    @classmethod
    def load(cls, path: Path, check_files: bool = True) -> "DatasetIndex":
        """
        Read an index CSV.

        Raises:
            DatasetError: Missing file, missing columns, non-finite positions,
                unknown split, or (with check_files) a cloud file that does not exist
        """
        path = Path(path)
        if not path.exists():
            raise DatasetError(f"index file not found: {path}")
        try:
            frame = pd.read_csv(
                path, dtype={"path": str, "split": str, "run": str}, float_precision="round_trip"
            )
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise DatasetError(f"{path}: cannot parse index: {e}")

        missing = [c for c in INDEX_COLUMNS if c not in frame.columns]
        if missing:
            raise DatasetError(f"{path}: missing column(s) {', '.join(missing)}")
        positions = frame[["northing", "easting"]].to_numpy(dtype=np.float64)
        if not np.all(np.isfinite(positions)):
            raise DatasetError(f"{path}: positions must be finite")
        bad = sorted(set(frame["split"]) - set(SPLITS))
        if bad:
            raise DatasetError(f"{path}: unknown split tag(s) {', '.join(bad)}")

        rows = [
            IndexRow(str(r.path), float(r.northing), float(r.easting), str(r.split), str(r.run))
            for r in frame.itertuples(index=False)
        ]
        index = cls(rows, path.parent)
        if check_files:
            for i in range(len(index)):
                if not index.cloud_path(i).exists():
                    raise DatasetError(f"{path}: cloud file not found: {index.rows[i].path}")
        return index

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(
            [[r.path, r.northing, r.easting, r.split, r.run] for r in self.rows],
            columns=INDEX_COLUMNS,
        )
        frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        return path


def _sample_plane(rng: np.random.Generator) -> Sampler:
    height = rng.uniform(-1.0, -0.8)
    tilt = rng.uniform(-0.05, 0.05, size=2)

    def sample(r: np.random.Generator, m: int) -> np.ndarray:
        xy = r.uniform(-1.0, 1.0, size=(m, 2))
        return np.column_stack([xy, height + xy @ tilt])

    return sample


def _sample_box(rng: np.random.Generator) -> Sampler:
    center = np.array([*rng.uniform(-0.7, 0.7, size=2), rng.uniform(-0.6, 0.2)])
    half = rng.uniform(0.05, 0.3, size=3)

    def sample(r: np.random.Generator, m: int) -> np.ndarray:
        # uniform on a random face: fix one axis to +-half, spread the other two
        face_axis = r.integers(0, 3, size=m)
        sign = r.choice([-1.0, 1.0], size=m)
        local = r.uniform(-1.0, 1.0, size=(m, 3))
        local[np.arange(m), face_axis] = sign
        return center + local * half

    return sample


def _sample_cylinder(rng: np.random.Generator) -> Sampler:
    base = np.array([*rng.uniform(-0.7, 0.7, size=2), rng.uniform(-0.9, -0.5)])
    radius = rng.uniform(0.05, 0.2)
    height = rng.uniform(0.2, 0.8)

    def sample(r: np.random.Generator, m: int) -> np.ndarray:
        theta = r.uniform(0.0, 2.0 * np.pi, size=m)
        z = r.uniform(0.0, height, size=m)
        return base + np.column_stack([radius * np.cos(theta), radius * np.sin(theta), z])

    return sample


def scene_samplers(synth: SynthConfig, scene: int) -> List[Sampler]:
    """Primitive surface samplers of one scene, fixed by (seed, scene)."""
    rng = rng_stream(synth.seed, "dataset", scene)
    samplers = [_sample_plane(rng) for _ in range(synth.planes)]
    samplers += [_sample_box(rng) for _ in range(synth.boxes)]
    samplers += [_sample_cylinder(rng) for _ in range(synth.cylinders)]
    return samplers


def sample_scene(synth: SynthConfig, scene: int, copy: int) -> PointCloud:
    """
    One observation of a scene: a fresh surface sample of its primitives plus
    per-point jitter, clipped to the [-1, 1] cube.
    """
    samplers = scene_samplers(synth, scene)
    rng = rng_stream(synth.seed, "dataset", scene, copy + 1)
    shares = np.full(len(samplers), synth.points // len(samplers))
    shares[: synth.points % len(samplers)] += 1
    points = np.concatenate([s(rng, int(m)) for s, m in zip(samplers, shares)])
    points = points + rng.normal(0.0, synth.copy_jitter, size=points.shape)
    return PointCloud(np.clip(points, -1.0, 1.0))


def scene_position(synth: SynthConfig, scene: int) -> np.ndarray:
    """Scenes sit on a square grid `spacing` meters apart."""
    cols = math.ceil(math.sqrt(synth.scenes))
    row, col = divmod(scene, cols)
    return np.array([row * synth.spacing, col * synth.spacing], dtype=np.float64)


def gen_synth(synth: SynthConfig, out_dir: Path, force: bool = False) -> DatasetIndex:
    """
    Write a synthetic dataset: `copies` observations of every scene and an index.

    Copies of one scene share its position up to a 1 m offset (positives); the last
    copy is the `test` split and the rest are `train`.

    Raises:
        DatasetError: If out_dir exists and is not empty, unless force is set
    """
    synth.validate()
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise DatasetError(f"output directory is not empty: {out_dir} (use --force)")
        for old in sorted((out_dir / "clouds").glob("*.bin")):
            old.unlink()
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)

    rows = []
    for scene in range(synth.scenes):
        center = scene_position(synth, scene)
        for copy in range(synth.copies):
            offset = rng_stream(synth.seed, "position", scene, copy).uniform(-1.0, 1.0, size=2)
            relative = Path("clouds") / f"scene{scene:04d}_copy{copy}.bin"
            sample_scene(synth, scene, copy).to_file(out_dir / relative)
            north, east = center + offset
            split = "test" if copy == synth.copies - 1 else "train"
            rows.append(
                IndexRow(relative.as_posix(), float(north), float(east), split, f"run{copy}")
            )

    index = DatasetIndex(rows, out_dir)
    index.save(out_dir / INDEX_FILE)
    logger.info(
        f"Generated {len(rows)} clouds in {out_dir}",
        extra={
            "event": "synth_generated",
            "metadata": {"scenes": synth.scenes, "copies": synth.copies, "points": synth.points},
        },
    )
    return index


def load_index(path: Optional[Path], default_dir: Path) -> DatasetIndex:
    """Load an index file, or `index.csv` inside a dataset directory."""
    path = Path(path) if path is not None else Path(default_dir)
    if path.is_dir():
        path = path / INDEX_FILE
    return DatasetIndex.load(path)
