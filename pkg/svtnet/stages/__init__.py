"""
Experiment stages for svtnet.

Each stage is responsible for one step of an experiment:
- synth: Generate the synthetic scene set and its index
- train: Fit a model on the train split
- embed: Write descriptors for every split
- eval: Recall of test queries against the train database
"""

from .base import RunLayout, Stage, StageOutput, StageResult
from .embed import EmbedStage
from .evaluate import EvalStage
from .synth import SynthStage
from .train import TrainStage

STAGES = {
    SynthStage.name: SynthStage,
    TrainStage.name: TrainStage,
    EmbedStage.name: EmbedStage,
    EvalStage.name: EvalStage,
}
STAGE_ORDER = ("synth", "train", "embed", "eval")

__all__ = [
    "RunLayout",
    "Stage",
    "StageOutput",
    "StageResult",
    "SynthStage",
    "TrainStage",
    "EmbedStage",
    "EvalStage",
    "STAGES",
    "STAGE_ORDER",
]
