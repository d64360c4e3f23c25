"""
Experiment orchestrator for svtnet.

Runs synth → train → embed → eval against one experiment directory and keeps the
outcome of the last run in `state.json`.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from svtnet.config import ExperimentConfig, load_config
from svtnet.stages import STAGE_ORDER, STAGES, Stage, StageResult
from svtnet.utils import (
    format_duration,
    print_banner,
    print_error,
    print_info,
    print_success,
    resolve_log_level,
    setup_logging,
)


@dataclass
class PipelineResult:
    success: bool
    started_at: datetime
    ended_at: datetime
    duration_seconds: float
    stages: Dict[str, StageResult] = field(default_factory=dict)
    error_message: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "success": self.success,
            "started_at": self.started_at.isoformat(),
            "ended_at": self.ended_at.isoformat(),
            "duration_seconds": self.duration_seconds,
            "error_message": self.error_message,
            "stages": {name: r.to_dict() for name, r in self.stages.items()},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PipelineResult":
        return cls(
            success=data["success"],
            started_at=datetime.fromisoformat(data["started_at"]),
            ended_at=datetime.fromisoformat(data["ended_at"]),
            duration_seconds=data["duration_seconds"],
            stages={n: StageResult.from_dict(s) for n, s in data.get("stages", {}).items()},
            error_message=data.get("error_message"),
        )


class Pipeline:
    """
    Runs experiment stages in pipeline order and stops at the first failure.

    Args:
        config: Experiment configuration (defaults to config/svtnet.yaml)
    """

    def __init__(self, config: Optional[ExperimentConfig] = None):
        self.config = config or load_config()
        self.logger: Optional[logging.Logger] = None
        self._clock = 0.0
        self._started_at: Optional[datetime] = None

    def _ensure_logger(self, verbose: bool = False) -> logging.Logger:
        if self.logger is None:
            lc = self.config.logging
            self.logger = setup_logging(
                self.config.get_log_file_path(),
                resolve_log_level(lc.level, verbose),
                lc.format,
                lc.console,
            )
        return self.logger

    def _select(self, stages: Optional[List[str]]) -> List[str]:
        """Requested stage names in pipeline order (all of them when none are given)."""
        if not stages:
            return list(STAGE_ORDER)
        unknown = sorted(set(stages) - set(STAGES))
        if unknown:
            raise ValueError(f"Unknown stage(s): {', '.join(unknown)}")
        return [name for name in STAGE_ORDER if name in stages]

    def create_stage(self, name: str) -> Stage:
        return STAGES[name](self.config, self._ensure_logger())

    def _finish(
        self,
        success: bool,
        stages: Optional[Dict[str, StageResult]] = None,
        error: Optional[str] = None,
        save: bool = True,
    ) -> PipelineResult:
        result = PipelineResult(
            success=success,
            started_at=self._started_at,
            ended_at=datetime.now(timezone.utc),
            duration_seconds=time.perf_counter() - self._clock,
            stages=stages or {},
            error_message=error,
        )
        if save:
            self._save_state(result)
        return result

    def run(
        self,
        stages: Optional[List[str]] = None,
        dry_run: bool = False,
        verbose: bool = False,
    ) -> PipelineResult:
        """
        Run the selected stages.

        Args:
            stages: Stage names, executed in pipeline order (default: all)
            dry_run: Only validate the configuration and the stage selection
            verbose: Enable debug logging

        Returns:
            PipelineResult; `stages` holds every stage that ran, the failed one last
        """
        self._started_at = datetime.now(timezone.utc)
        self._clock = time.perf_counter()
        logger = self._ensure_logger(verbose)
        variant = self.config.model.variant

        print_banner(f"svtnet experiment: {variant}")
        logger.info(
            f"Experiment {self.config.output_dir}",
            extra={
                "event": "pipeline_start",
                "metadata": {"variant": variant, "seed": self.config.seed, "dry_run": dry_run},
            },
        )

        try:
            self.config.validate()
            selected = self._select(stages)
        except Exception as e:
            print_error(f"Pipeline failed: {e}")
            logger.error(
                f"Invalid experiment: {e}", extra={"event": "pipeline_invalid"}, exc_info=True
            )
            return self._finish(False, error=str(e), save=False)

        print_success(f"Configuration valid; stages: {', '.join(selected)}")
        if dry_run:
            print_info("Dry run: nothing executed")
            return self._finish(True, save=False)

        results: Dict[str, StageResult] = {}
        for name in selected:
            result = results[name] = self.create_stage(name).run()
            if not result.success:
                print_error(f"{name}: {result.error_message}")
                logger.error(
                    f"Stopping after failed stage {name}",
                    extra={"event": "pipeline_stopped", "stage": name},
                )
                return self._finish(
                    False, results, error=f"Stage {name} failed: {result.error_message}"
                )
            print_success(
                f"{name}: {result.records_processed} records, "
                f"{len(result.output_files)} files, {format_duration(result.duration_seconds)}"
            )

        outcome = self._finish(True, results)
        print_success(f"Pipeline completed in {format_duration(outcome.duration_seconds)}")
        logger.info(
            "Pipeline completed",
            extra={
                "event": "pipeline_done",
                "metadata": {"seconds": outcome.duration_seconds, "stages": selected},
            },
        )
        return outcome

    def status(self) -> Optional[PipelineResult]:
        """The last recorded run, or None if there is none (or it cannot be read)."""
        state_file = self.config.get_state_file()
        if not state_file.exists():
            return None
        try:
            return PipelineResult.from_dict(json.loads(state_file.read_text()))
        except (OSError, KeyError, TypeError, ValueError) as e:
            if self.logger:
                self.logger.warning(f"Unreadable state file {state_file}: {e}")
            return None

    def _save_state(self, result: PipelineResult) -> None:
        state_file = self.config.get_state_file()
        try:
            state_file.parent.mkdir(parents=True, exist_ok=True)
            state_file.write_text(json.dumps(result.to_dict(), indent=2, default=str))
        except OSError as e:
            if self.logger:
                self.logger.warning(
                    f"Could not write {state_file}: {e}",
                    extra={"event": "state_write_failed"},
                )
