"""
Descriptor database, exact k-nearest-neighbor search and recall metrics.

A retrieval for a query counts as correct when one of its top-n database entries
lies within the match radius (25 m by default) of the query's position. Queries
with no database entry inside the radius are excluded and counted.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

MATCH_RADIUS = 25.0


@dataclass
class DescriptorDB:
    """M descriptors with their planar positions and labels; immutable after build."""

    descriptors: np.ndarray
    positions: np.ndarray
    ids: List[str]

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.ids = [str(i) for i in self.ids]
        if self.descriptors.ndim != 2:
            raise ValueError(f"descriptors must be a matrix, got shape {self.descriptors.shape}")
        m = self.descriptors.shape[0]
        if self.positions.shape[0] != m or len(self.ids) != m:
            raise ValueError(
                f"row counts disagree: {m} descriptors, {self.positions.shape[0]} positions, "
                f"{len(self.ids)} ids"
            )
        if not np.all(np.isfinite(self.descriptors)):
            raise ValueError("descriptors must be finite")

    def __len__(self) -> int:
        return self.descriptors.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


def knn(db: DescriptorDB, q: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exact k nearest neighbors of one query by Euclidean distance.

    Returns:
        (indices, distances), ascending by distance, ties broken by lower index

    Raises:
        ValueError: If the database is empty or k is outside [1, M]
    """
    if len(db) == 0:
        raise ValueError("knn: empty database")
    if not 1 <= k <= len(db):
        raise ValueError(f"knn: k must be in [1, {len(db)}], got {k}")
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != db.dim:
        raise ValueError(f"knn: query has dim {q.shape[0]}, database has {db.dim}")
    dist = np.sqrt(((db.descriptors - q) ** 2).sum(axis=1))
    order = np.argsort(dist, kind="stable")[:k]
    return order, dist[order]


def one_percent_n(m: int) -> int:
    """Top-1% cutoff: round(M / 100) half up, at least 1."""
    return max(1, (m + 50) // 100)


def _first_hits(
    db: DescriptorDB,
    queries: np.ndarray,
    query_positions: np.ndarray,
    radius: float,
    workers: int = 1,
) -> np.ndarray:
    """
    Rank (0-based) of the first true match in each query's full ranking; -1 if the
    query has no database entry within `radius`.
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, db.dim)
    query_positions = np.asarray(query_positions, dtype=np.float64).reshape(-1, 2)
    if queries.shape[0] != query_positions.shape[0]:
        raise ValueError(
            f"{queries.shape[0]} queries but {query_positions.shape[0]} query positions"
        )
    if len(db) == 0:
        raise ValueError("empty database")

    def first_hit(i: int) -> int:
        truth = np.linalg.norm(db.positions - query_positions[i], axis=1) <= radius
        if not truth.any():
            return -1
        order, _ = knn(db, queries[i], len(db))
        return int(np.argmax(truth[order]))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        hits = list(executor.map(first_hit, range(queries.shape[0])))
    return np.array(hits, dtype=np.int64)


def _recall_from_hits(hits: np.ndarray, n: int) -> float:
    valid = hits >= 0
    if not valid.any():
        return 0.0
    return float(np.mean(hits[valid] < n))


def recall_at_n(
    db: DescriptorDB,
    queries: np.ndarray,
    query_positions: np.ndarray,
    n: int,
    radius: float = MATCH_RADIUS,
    workers: int = 1,
) -> float:
    """
    Fraction of queries whose top-n results hold an entry within `radius` meters.

    Raises:
        ValueError: If n < 1
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return _recall_from_hits(_first_hits(db, queries, query_positions, radius, workers), n)


def recall_at_one_percent(
    db: DescriptorDB,
    queries: np.ndarray,
    query_positions: np.ndarray,
    radius: float = MATCH_RADIUS,
    workers: int = 1,
) -> float:
    return recall_at_n(db, queries, query_positions, one_percent_n(len(db)), radius, workers)


@dataclass
class RecallReport:
    """Benchmark-table row for one dataset tag plus the recall curve."""

    tag: str
    database_size: int
    queries: int
    excluded: int
    one_percent_n: int
    recall_at_1: float
    recall_at_one_percent: float
    curve: Dict[int, float] = field(default_factory=dict)
    ms_per_cloud: Optional[float] = None

    def summary_line(self) -> str:
        return (
            f"{self.tag}: recall@1={self.recall_at_1:.4f} "
            f"recall@1%={self.recall_at_one_percent:.4f} (n={self.one_percent_n}, "
            f"queries={self.queries}, excluded={self.excluded})"
        )

    def to_dict(self) -> Dict:
        return {
            "tag": self.tag,
            "database_size": self.database_size,
            "queries": self.queries,
            "excluded": self.excluded,
            "one_percent_n": self.one_percent_n,
            "recall_at_1": self.recall_at_1,
            "recall_at_one_percent": self.recall_at_one_percent,
            "ms_per_cloud": self.ms_per_cloud,
        }


def recall_curve(
    db: DescriptorDB,
    queries: np.ndarray,
    query_positions: np.ndarray,
    max_n: int = 25,
    radius: float = MATCH_RADIUS,
    workers: int = 1,
    tag: str = "dataset",
) -> RecallReport:
    """
    Recall for n = 1..max_n (capped at M) plus recall@1 and recall@1%, from one ranking
    per query. Every evaluated query weighs the same.
    """
    hits = _first_hits(db, queries, query_positions, radius, workers)
    top = max(1, min(max_n, len(db)))
    cutoff = one_percent_n(len(db))
    excluded = int(np.count_nonzero(hits < 0))
    if excluded:
        logger.warning(
            f"{excluded} queries have no database entry within {radius} m",
            extra={"event": "queries_excluded", "metadata": {"excluded": excluded}},
        )
    return RecallReport(
        tag=tag,
        database_size=len(db),
        queries=int(hits.size - excluded),
        excluded=excluded,
        one_percent_n=cutoff,
        recall_at_1=_recall_from_hits(hits, 1),
        recall_at_one_percent=_recall_from_hits(hits, cutoff),
        curve={n: _recall_from_hits(hits, n) for n in range(1, top + 1)},
    )


def write_descriptors(
    path: Path, ids: Sequence[str], positions: np.ndarray, descriptors: np.ndarray
) -> Path:
    """CSV with header `id,northing,easting,f0..f{d-1}`, floats written round-trip exact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    descriptors = np.asarray(descriptors, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    frame = pd.DataFrame(descriptors, columns=[f"f{i}" for i in range(descriptors.shape[1])])
    frame.insert(0, "easting", positions[:, 1])
    frame.insert(0, "northing", positions[:, 0])
    frame.insert(0, "id", list(ids))
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def read_descriptors(path: Path) -> DescriptorDB:
    """
    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: If the header is not `id,northing,easting,f0,...`
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Descriptor file not found: {path}")
    frame = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
    features = [c for c in frame.columns if c not in ("id", "northing", "easting")]
    expected = ["id", "northing", "easting"] + [f"f{i}" for i in range(len(features))]
    if list(frame.columns) != expected or not features:
        raise ValueError(f"{path}: header must be id,northing,easting,f0..f{{d-1}}")
    return DescriptorDB(
        descriptors=frame[features].to_numpy(dtype=np.float64),
        positions=frame[["northing", "easting"]].to_numpy(dtype=np.float64),
        ids=frame["id"].tolist(),
    )


def write_report(out_dir: Path, reports: Sequence[RecallReport]) -> List[Path]:
    """
    Write `recall_table.csv` (one row per tag: AR@1%, AR@1, ms/cloud) and one
    `recall_curve_<tag>.csv` of (n, recall) pairs per tag.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = pd.DataFrame(
        [
            {
                "tag": r.tag,
                "ar_at_1pct": r.recall_at_one_percent,
                "ar_at_1": r.recall_at_1,
                "one_percent_n": r.one_percent_n,
                "queries": r.queries,
                "excluded": r.excluded,
                "ms_per_cloud": r.ms_per_cloud,
            }
            for r in reports
        ]
    )
    table_path = out_dir / "recall_table.csv"
    table.to_csv(table_path, index=False, float_format="%.6f", lineterminator="\n")
    paths = [table_path]
    for r in reports:
        curve = pd.DataFrame({"n": list(r.curve), "recall": list(r.curve.values())})
        curve_path = out_dir / f"recall_curve_{r.tag}.csv"
        curve.to_csv(curve_path, index=False, float_format="%.6f", lineterminator="\n")
        paths.append(curve_path)
    return paths
