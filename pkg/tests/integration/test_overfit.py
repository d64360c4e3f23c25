"""Desk-scale retrieval on the default synthetic set (30 scenes x 3 copies).

Deselected by default; run with `pytest -m slow`.
"""

import pandas as pd
import pytest

from svtnet.config import (
    AugmentConfig,
    EvalConfig,
    ExperimentConfig,
    ModelConfig,
    SynthConfig,
    TrainConfig,
)
from svtnet.pipeline import Pipeline
from svtnet.stages import RunLayout

pytestmark = [pytest.mark.slow, pytest.mark.integration]

MAX_ITERATIONS = 200


def overfit_experiment(tmp_path, variant: str) -> ExperimentConfig:
    config = ExperimentConfig(
        seed=11,
        workers=4,
        output_dir=tmp_path / variant,
        model=ModelConfig(variant=variant),
        training=TrainConfig(
            epochs=MAX_ITERATIONS, lr_decay_epoch=150, max_iterations=MAX_ITERATIONS
        ),
        augment=AugmentConfig(),
        synth=SynthConfig(seed=11),
        eval=EvalConfig(tag="overfit"),
    )
    config.logging.console = False
    config.validate()
    return config


@pytest.mark.parametrize(
    "variant,threshold", [("svt", 0.95), ("asvt_only", 0.90), ("csvt_only", 0.90)]
)
def test_held_out_copies_are_retrieved(tmp_path, variant, threshold):
    config = overfit_experiment(tmp_path, variant)
    result = Pipeline(config).run()
    assert result.success, result.error_message
    assert result.stages["train"].records_processed <= MAX_ITERATIONS

    table = pd.read_csv(RunLayout.from_config(config).eval_dir / "recall_table.csv")
    row = table.iloc[0]
    assert row["queries"] == 30
    assert row["one_percent_n"] == 1
    assert row["ar_at_1"] >= threshold
    assert row["ar_at_1pct"] == row["ar_at_1"]
