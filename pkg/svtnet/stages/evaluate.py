"""
Eval stage: recall of test-split queries against the train-split database.
"""

import json
from pathlib import Path

from svtnet.retrieval import read_descriptors, recall_curve, write_report
from svtnet.stages.base import Stage, StageOutput


class EvalStage(Stage):
    name = "eval"

    @property
    def workspace(self) -> Path:
        return self.layout.eval_dir

    def inputs(self):
        return [(self.layout.descriptors(split), "embed") for split in ("train", "test")]

    def validate(self) -> None:
        super().validate()
        self.config.eval.validate()

    def execute(self) -> StageOutput:
        db = read_descriptors(self.layout.descriptors("train"))
        queries = read_descriptors(self.layout.descriptors("test"))
        ec = self.config.eval

        report = recall_curve(
            db,
            queries.descriptors,
            queries.positions,
            max_n=ec.curve_max_n,
            radius=ec.match_radius,
            workers=self.config.workers,
            tag=ec.tag,
        )
        if self.layout.timing_file.exists():
            report.ms_per_cloud = json.loads(self.layout.timing_file.read_text())["ms_per_cloud"]

        files = write_report(self.layout.eval_dir, [report])
        self.logger.info(
            report.summary_line(),
            extra={"stage": self.name, "event": "recall_computed", "metadata": report.to_dict()},
        )
        return StageOutput(
            records=report.queries,
            files=files,
            metadata=report.to_dict(),
        )
