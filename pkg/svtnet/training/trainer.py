"""
Training loop.

Each iteration embeds one batch of augmented clouds in train mode (batch-norm
statistics over the whole batch), mines batch-hard triplets, backpropagates and
applies one Adam step; the batch sizer then reacts to the active-triplet count.
All randomness comes from named streams of the experiment seed, keyed by epoch
and sample id, so results do not depend on the worker count.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import pandas as pd

from svtnet import checkpoint
from svtnet.config import ExperimentConfig
from svtnet.dataset import DatasetError, DatasetIndex
from svtnet.layers import Context
from svtnet.model import ModelParams, build, forward, voxelize_batch
from svtnet.sparse_tensor import PointCloud
from svtnet.training.augment import augment
from svtnet.training.batching import (
    BatchSizer,
    dynamic_batch_update,
    epoch_batches,
    positive_neighbors,
)
from svtnet.training.loss import pair_labels, triplet_loss_batch_hard
from svtnet.training.optim import OptimState, adam_step, learning_rate
from svtnet.utils import rng_stream

logger = logging.getLogger(__name__)

EPOCH_LOG_COLUMNS = ["epoch", "loss", "active_fraction", "batch_size", "lr"]


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    active_fraction: float
    batch_size: int
    lr: float
    iterations: int = 0
    skipped_batches: int = 0


@dataclass
class TrainResult:
    params: ModelParams
    history: List[EpochRecord] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    iterations: int = 0
    log_file: Optional[Path] = None

    @property
    def final_checkpoint(self) -> Optional[Path]:
        return self.checkpoints[-1] if self.checkpoints else None


def write_epoch_log(path: Path, history: List[EpochRecord]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([asdict(r) for r in history], columns=list(asdict(history[0])))
    frame[EPOCH_LOG_COLUMNS].to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    return path


def train(
    dataset: DatasetIndex,
    config: ExperimentConfig,
    seed: Optional[int] = None,
    out_dir: Optional[Path] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """
    Train a model on every cloud of `dataset` (normally the train split).

    Args:
        dataset: Clouds with positions
        config: Experiment configuration (model, training, augment sections)
        seed: Overrides config.seed
        out_dir: Where the epoch log and checkpoints go (default config.output_dir / "train")
        on_epoch: Called with each finished epoch record

    Returns:
        TrainResult with the trained params, per-epoch history and checkpoint paths

    Raises:
        DatasetError: If no two clouds lie within the positive radius
    """
    seed = config.seed if seed is None else seed
    tc = config.training
    out_dir = Path(out_dir) if out_dir is not None else config.output_dir / "train"

    positions = dataset.positions
    neighbors = positive_neighbors(positions, tc.positive_radius)
    if not any(len(n) for n in neighbors):
        raise DatasetError(
            f"dataset has no positive pairs within {tc.positive_radius} m; nothing to train on"
        )

    clouds: List[PointCloud] = [dataset.load_cloud(i) for i in range(len(dataset))]
    params = build(config.model, seed)
    named = dict(params.named_parameters())
    state = OptimState.for_params(named)
    sizer = BatchSizer(tc.batch_init, tc.batch_max, tc.batch_growth, tc.batch_trigger)

    result = TrainResult(params=params, log_file=out_dir / "epochs.csv")
    logger.info(
        f"Training {config.model.variant} on {len(dataset)} clouds",
        extra={
            "event": "training_started",
            "metadata": {"seed": seed, "epochs": tc.epochs, "profile": tc.profile},
        },
    )

    with ThreadPoolExecutor(max_workers=config.workers) as executor:
        for epoch in range(tc.epochs):
            lr = learning_rate(tc, epoch)
            losses, active_total, seen, iterations, skipped = [], 0, 0, 0, 0

            for batch in epoch_batches(neighbors, sizer, rng_stream(seed, "batch", epoch)):
                labels = pair_labels(positions[batch], tc.positive_radius, tc.negative_radius)
                if len(batch) < 2 or len(labels.valid_anchors) == 0:
                    skipped += 1
                    continue

                batch_clouds = list(
                    executor.map(
                        lambda i: augment(
                            clouds[i], rng_stream(seed, "augment", epoch, i), config.augment
                        ),
                        batch.tolist(),
                    )
                )
                ctx = Context(mode="train")
                out = forward(ctx, params, voxelize_batch(batch_clouds, config.model.quant_step))
                loss, active = triplet_loss_batch_hard(
                    ctx.tape, out.descriptors, labels, tc.margin, tc.loss_reduction
                )
                adam_step(named, ctx.gradients(loss, params), state, lr)

                losses.append(float(ctx.value(loss)[0, 0]))
                active_total += active
                seen += len(batch)
                iterations += 1
                result.iterations += 1
                dynamic_batch_update(active, sizer)
                if tc.max_iterations is not None and result.iterations >= tc.max_iterations:
                    break

            record = EpochRecord(
                epoch=epoch,
                loss=float(np.mean(losses)) if losses else float("nan"),
                active_fraction=active_total / seen if seen else 0.0,
                batch_size=sizer.size,
                lr=lr,
                iterations=iterations,
                skipped_batches=skipped,
            )
            result.history.append(record)
            write_epoch_log(result.log_file, result.history)
            logger.info(
                f"Epoch {epoch}: loss={record.loss:.6f} active={record.active_fraction:.3f} "
                f"batch={record.batch_size}",
                extra={"event": "epoch_finished", "metadata": asdict(record)},
            )

            done = tc.max_iterations is not None and result.iterations >= tc.max_iterations
            last = epoch == tc.epochs - 1 or done
            if (epoch + 1) % tc.checkpoint_every == 0 or last:
                path = out_dir / "checkpoints" / f"epoch_{epoch:03d}.svtn"
                result.checkpoints.append(checkpoint.save(params, path))
            if on_epoch is not None:
                on_epoch(record)
            if done:
                break

    if result.iterations == 0:
        logger.warning(
            "No batch had a valid anchor; parameters are untrained",
            extra={"event": "training_empty", "metadata": {"clouds": len(dataset)}},
        )
    checkpoint.save(params, out_dir / "model.svtn")
    result.checkpoints.append(out_dir / "model.svtn")
    logger.info(
        f"Training finished after {result.iterations} iterations",
        extra={"event": "training_finished", "metadata": {"iterations": result.iterations}},
    )
    return result
