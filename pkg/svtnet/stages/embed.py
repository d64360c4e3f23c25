"""
Embed stage: descriptors for every cloud of each split, one CSV per split.
"""

import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Tuple

import numpy as np

from svtnet import checkpoint
from svtnet.dataset import SPLITS, DatasetIndex
from svtnet.model import ModelParams, embed
from svtnet.retrieval import write_descriptors
from svtnet.stages.base import Stage, StageOutput


def embed_index(
    params: ModelParams, index: DatasetIndex, workers: int = 1
) -> Tuple[np.ndarray, float]:
    """
    Eval-mode descriptor of every cloud in `index`, one cloud per forward pass.

    Returns:
        ((N, output_dim) descriptors in index order, mean milliseconds per cloud)
    """
    if len(index) == 0:
        return np.zeros((0, params.config.output_dim)), 0.0

    def run(i: int) -> Tuple[np.ndarray, float]:
        pc = index.load_cloud(i)
        start = time.perf_counter()
        descriptor = embed(params, pc)
        return descriptor, (time.perf_counter() - start) * 1000.0

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        outputs = list(executor.map(run, range(len(index))))
    descriptors = np.stack([d for d, _ in outputs])
    return descriptors, float(np.mean([ms for _, ms in outputs]))


class EmbedStage(Stage):
    name = "embed"

    @property
    def workspace(self) -> Path:
        return self.layout.descriptor_dir

    def inputs(self):
        return [(self.layout.index_file, "synth"), (self.layout.checkpoint, "train")]

    def execute(self) -> StageOutput:
        params = checkpoint.load(self.layout.checkpoint, expected=self.config.model)
        index = DatasetIndex.load(self.layout.index_file)

        outputs, timings, total = [], [], 0
        for split in SPLITS:
            subset = index.split(split)
            descriptors, ms = embed_index(params, subset, self.config.workers)
            outputs.append(
                write_descriptors(
                    self.layout.descriptors(split), subset.ids, subset.positions, descriptors
                )
            )
            timings.append((len(subset), ms))
            total += len(subset)

        ms_per_cloud = sum(n * ms for n, ms in timings) / total if total else 0.0
        self.layout.timing_file.write_text(json.dumps({"ms_per_cloud": ms_per_cloud}, indent=2))
        outputs.append(self.layout.timing_file)
        return StageOutput(
            records=total,
            files=outputs,
            metadata={"ms_per_cloud": ms_per_cloud},
        )
