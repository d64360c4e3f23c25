"""
Train stage: fit a model on the train split of the dataset index.
"""

from pathlib import Path

from svtnet.dataset import DatasetIndex
from svtnet.stages.base import Stage, StageOutput
from svtnet.training import train


class TrainStage(Stage):
    name = "train"

    @property
    def workspace(self) -> Path:
        return self.layout.train_dir

    def inputs(self):
        return [(self.layout.index_file, "synth")]

    def validate(self) -> None:
        super().validate()
        self.config.training.validate()

    def execute(self) -> StageOutput:
        dataset = DatasetIndex.load(self.layout.index_file).split("train")
        result = train(dataset, self.config, out_dir=self.workspace)
        last = result.history[-1]
        return StageOutput(
            records=result.iterations,
            files=[result.log_file, *result.checkpoints],
            metadata={
                "epochs": len(result.history),
                "final_loss": last.loss,
                "final_batch_size": last.batch_size,
                "skipped_batches": sum(r.skipped_batches for r in result.history),
            },
        )
