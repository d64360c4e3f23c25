"""
Synth stage: generate the synthetic scene set and its index.
"""

from pathlib import Path

from svtnet.dataset import gen_synth
from svtnet.stages.base import Stage, StageOutput


class SynthStage(Stage):
    """Writes `data/` (clouds + index.csv); overwrites a previous run's clouds."""

    name = "synth"

    @property
    def workspace(self) -> Path:
        return self.layout.data_dir

    def validate(self) -> None:
        super().validate()
        self.config.synth.validate()

    def execute(self) -> StageOutput:
        index = gen_synth(self.config.synth, self.workspace, force=True)
        return StageOutput(
            records=len(index),
            files=[self.layout.index_file],
            metadata={
                "train": len(index.split("train")),
                "test": len(index.split("test")),
            },
        )
