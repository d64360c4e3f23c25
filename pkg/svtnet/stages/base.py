"""
Stage lifecycle for svtnet experiments.

A stage names the artifacts it needs from earlier stages, writes into its own
workspace under the run layout and hands back a StageOutput. Stage.run() turns
that (or the exception that stopped it) into a StageResult.
"""

import dataclasses
import logging
import os
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from svtnet.config import ExperimentConfig


@dataclass
class StageOutput:
    """What a stage produced: a record count, the files written, summary numbers."""

    records: int
    files: List[Path] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)


@dataclass
class StageResult:
    """Outcome of one stage run, as stored in state.json."""

    stage_name: str
    success: bool
    duration_seconds: float
    records_processed: int = 0
    output_files: List[Path] = field(default_factory=list)
    error_message: Optional[str] = None
    metadata: Dict[str, Any] = field(default_factory=dict)
    started_at: Optional[datetime] = None
    ended_at: Optional[datetime] = None

    _STAMPS = ("started_at", "ended_at")

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["output_files"] = [str(p) for p in self.output_files]
        for key in self._STAMPS:
            data[key] = data[key].isoformat() if data[key] else None
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "StageResult":
        """
        Rebuild a result from `to_dict` output.

        Raises:
            TypeError: If stage_name, success or duration_seconds is missing
            ValueError: If a timestamp is not ISO formatted
        """
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in data.items() if k in known}
        kwargs["output_files"] = [Path(p) for p in data.get("output_files", [])]
        for key in cls._STAMPS:
            kwargs[key] = datetime.fromisoformat(data[key]) if data.get(key) else None
        return cls(**kwargs)


@dataclass(frozen=True)
class RunLayout:
    """Where each stage reads and writes inside one experiment directory."""

    root: Path

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "RunLayout":
        return cls(Path(config.output_dir))

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def index_file(self) -> Path:
        return self.data_dir / "index.csv"

    @property
    def train_dir(self) -> Path:
        return self.root / "train"

    @property
    def checkpoint(self) -> Path:
        return self.train_dir / "model.svtn"

    @property
    def descriptor_dir(self) -> Path:
        return self.root / "descriptors"

    def descriptors(self, split: str) -> Path:
        return self.descriptor_dir / f"{split}.csv"

    @property
    def timing_file(self) -> Path:
        return self.descriptor_dir / "timing.json"

    @property
    def eval_dir(self) -> Path:
        return self.root / "eval"


class Stage(ABC):
    """
    One step of an experiment run.

    Subclasses set `name`, point `workspace` at their layout directory, list the
    artifacts they consume in `inputs()` and implement `execute()`. Overrides of
    `validate()` should call the base version first.
    """

    name = "stage"

    def __init__(self, config: ExperimentConfig, logger: logging.Logger):
        self.config = config
        self.logger = logger
        self.layout = RunLayout.from_config(config)

    @property
    @abstractmethod
    def workspace(self) -> Path:
        """Directory this stage writes into."""

    def inputs(self) -> List[Tuple[Path, str]]:
        """(artifact, name of the stage that writes it) pairs."""
        return []

    def validate(self) -> None:
        """
        Check upstream artifacts and prepare the workspace.

        Raises:
            FileNotFoundError: If an artifact of an earlier stage is missing
            PermissionError: If the workspace is not writable
        """
        for path, producer in self.inputs():
            if not path.exists():
                raise FileNotFoundError(f"{path} not found (run the '{producer}' stage first)")
        self.workspace.mkdir(parents=True, exist_ok=True)
        if not os.access(self.workspace, os.W_OK):
            raise PermissionError(f"{self.workspace} is not writable")

    @abstractmethod
    def execute(self) -> StageOutput:
        pass

    def cleanup(self) -> None:
        pass

    def run(self) -> StageResult:
        """Validate, execute and clean up. Never raises; a failure sets success=False."""
        tags = {"stage": self.name}
        self.logger.info(f"{self.name}: starting", extra={**tags, "event": "stage_start"})
        started_at = datetime.now(timezone.utc)
        clock = time.perf_counter()

        output: Optional[StageOutput] = None
        error: Optional[str] = None
        try:
            self.validate()
            output = self.execute()
        except Exception as e:
            error = f"{type(e).__name__}: {e}"
            self.logger.error(
                f"{self.name}: {error}",
                extra={**tags, "event": "stage_error", "metadata": {"error": error}},
                exc_info=True,
            )
        finally:
            try:
                self.cleanup()
            except Exception as e:
                self.logger.warning(
                    f"{self.name}: cleanup raised {e}", extra={**tags, "event": "cleanup_error"}
                )

        result = StageResult(
            stage_name=self.name,
            success=output is not None,
            duration_seconds=time.perf_counter() - clock,
            records_processed=output.records if output else 0,
            output_files=list(output.files) if output else [],
            error_message=error,
            metadata=dict(output.metadata) if output else {},
            started_at=started_at,
            ended_at=datetime.now(timezone.utc),
        )
        if result.success:
            self.logger.info(
                f"{self.name}: {result.records_processed} records, "
                f"{len(result.output_files)} files",
                extra={
                    **tags,
                    "event": "stage_done",
                    "metadata": {
                        "seconds": result.duration_seconds,
                        "records": result.records_processed,
                        "files": len(result.output_files),
                    },
                },
            )
        return result

    def __repr__(self) -> str:
        return f"{type(self).__name__}(workspace={self.workspace})"
