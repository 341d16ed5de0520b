"""
Masked-pixel training of the Bi-RetNet.

Every sample gets a fresh random mask; masked positions are predicted in one
parallel (or chunkwise) pass from the unmasked context, and the loss is the mean
negative log-likelihood over masked positions, averaged over the batch.
"""

import csv
import math
import time
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from retcomplete.biretnet import (
    ModelParams,
    init_params,
    model_from_checkpoint,
    model_to_checkpoint,
    predict_logits,
)
from retcomplete.checkpoint import load_checkpoint, save_checkpoint
from retcomplete.config import MaskKind, MaskSpec, ModelConfig, Paradigm, TrainConfig
from retcomplete.errors import CheckpointError, TrainingError, UsageError
from retcomplete.masks import gen_mask
from retcomplete.optim import Adam
from retcomplete.palette import Palette
from retcomplete.rng import stream
from retcomplete.sequencer import PixelSequence, downsample
from retcomplete.tensor_core import Tensor, backward, log, log_softmax, mean, neg, pick

METRICS_COLUMNS = ("step", "loss", "acc", "ms_per_step")
TRAINING_MASK_KINDS = (MaskKind.RANDOM_STROKE, MaskKind.RANDOM_RECT)


class TrainMetrics(BaseModel):
    """Outcome of one optimisation step."""

    model_config = ConfigDict(frozen=True)

    step: int = Field(ge=0)
    mlm_loss: float = Field(ge=0.0)
    accuracy: float = Field(ge=0.0, le=1.0)
    ms_per_step: float = Field(ge=0.0)
    grad_norm: float = Field(default=0.0, ge=0.0)


def mlm_loss(pred: Tensor, targets: np.ndarray, mask: np.ndarray, logits: bool = True) -> Tensor:
    """
    Mean negative log-likelihood of the targets at masked positions.

    Args:
        pred: [L^2, k] logits, or probabilities when `logits` is False
        targets: [L^2] true palette indices
        mask: [L^2] with 1 at masked positions
        logits: Whether `pred` holds logits

    Raises:
        UsageError: If no position is masked
    """
    positions = np.flatnonzero(np.asarray(mask).reshape(-1))
    if positions.size == 0:
        raise UsageError("mlm_loss needs at least one masked position")
    rows = pred[positions]
    log_probs = log_softmax(rows, axis=-1) if logits else log(rows)
    chosen = pick(log_probs, np.asarray(targets).reshape(-1)[positions])
    return neg(mean(chosen))


def masked_accuracy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> Tuple[int, int]:
    """(correct, total) top-1 predictions over masked positions."""
    positions = np.flatnonzero(np.asarray(mask).reshape(-1))
    predicted = np.argmax(logits[positions], axis=-1)
    return int((predicted == np.asarray(targets).reshape(-1)[positions]).sum()), int(positions.size)


def sample_batch(dataset: np.ndarray, cfg: TrainConfig, step: int) -> List[PixelSequence]:
    """
    Draw the batch of a given step.

    The batch depends only on (cfg.seed, step), which makes resumed runs
    replay exactly the batches an uninterrupted run would see.
    """
    rng = stream(cfg.seed, "batches", step)
    side = dataset.shape[1]
    batch = []
    for index in rng.integers(0, len(dataset), size=cfg.batch_size):
        spec = MaskSpec(
            kind=TRAINING_MASK_KINDS[int(rng.integers(len(TRAINING_MASK_KINDS)))],
            ratio=float(rng.uniform(cfg.mask_ratio_min, cfg.mask_ratio_max)),
            seed=int(rng.integers(2**31)),
        )
        mask = gen_mask(spec, side)
        if not mask.any():
            mask[divmod(int(rng.integers(side * side)), side)] = 1
        batch.append(PixelSequence.from_grids(dataset[int(index)], mask))
    return batch


def train_step(
    batch: Sequence[PixelSequence],
    params: ModelParams,
    optimizer: Adam,
    cfg: TrainConfig,
) -> Tuple[ModelParams, TrainMetrics]:
    """
    One Adam update on the batch-mean MLM loss.

    Raises:
        TrainingError: If the loss or gradient norm is not finite
    """
    if not batch:
        raise UsageError("train_step needs a non-empty batch")
    started = time.perf_counter()
    optimizer.zero_grad()
    total: Optional[Tensor] = None
    sample_losses = []
    correct = counted = 0
    for seq in batch:
        logits = predict_logits(seq, params, Paradigm(cfg.paradigm), cfg.chunk)
        loss = mlm_loss(logits, seq.tokens, seq.mask)
        sample_losses.append(float(loss.data))
        total = loss if total is None else total + loss
        hits, n = masked_accuracy(logits.data, seq.tokens, seq.mask)
        correct += hits
        counted += n
    assert total is not None
    batch_loss = total / float(len(batch))
    value = float(batch_loss.data)
    if not math.isfinite(value):
        raise TrainingError(
            "loss is not finite",
            {"step": optimizer.t + 1, "sample_losses": sample_losses},
        )
    backward(batch_loss)
    norm = optimizer.step()
    if not math.isfinite(norm):
        raise TrainingError("gradient norm is not finite", {"step": optimizer.t, "grad_norm": norm})
    metrics = TrainMetrics(
        step=optimizer.t,
        mlm_loss=max(value, 0.0),
        accuracy=correct / counted,
        ms_per_step=(time.perf_counter() - started) * 1000.0,
        grad_norm=norm,
    )
    return params, metrics


def make_optimizer(params: ModelParams, cfg: TrainConfig) -> Adam:
    return Adam(
        params.named_parameters(),
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.adam_eps,
        clip_norm=cfg.clip_norm,
    )


def build_token_dataset(images: Sequence[np.ndarray], palette: Palette, side: int) -> np.ndarray:
    """Downsample and quantize images into [n, side, side] token grids."""
    if not images:
        raise UsageError("dataset is empty")
    return np.stack([palette.quantize(downsample(img, side)) for img in images])


def _append_metrics(path: Path, metrics: TrainMetrics) -> None:
    new_file = not path.exists()
    try:
        with path.open("a", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            if new_file:
                writer.writerow(METRICS_COLUMNS)
            writer.writerow(
                [
                    metrics.step,
                    f"{metrics.mlm_loss:.6f}",
                    f"{metrics.accuracy:.6f}",
                    f"{metrics.ms_per_step:.3f}",
                ]
            )
    except OSError as exc:
        raise CheckpointError(f"cannot append metrics to {path}: {exc}") from exc


def _save(
    path: Path,
    params: ModelParams,
    palette: Optional[Palette],
    optimizer: Adam,
    cfg: TrainConfig,
) -> Path:
    checkpoint = model_to_checkpoint(
        params,
        palette,
        extra_arrays=optimizer.state_arrays(),
        meta={"step": optimizer.t, "train": cfg.model_dump(mode="json")},
    )
    return save_checkpoint(checkpoint, path)


def train_loop(
    dataset: np.ndarray,
    cfg: TrainConfig,
    model_config: ModelConfig,
    out_dir: Union[str, Path],
    palette: Optional[Palette] = None,
    resume: Optional[Union[str, Path]] = None,
) -> Path:
    """
    Train for `cfg.steps` steps and write `final.rckpt` to `out_dir`.

    Args:
        dataset: [n, L, L] token grids
        cfg: Optimisation settings
        model_config: Shape of the model; must match the dataset and palette
        out_dir: Destination of checkpoints and metrics.csv; a fresh run starts a new metrics.csv
        palette: Palette embedded into every checkpoint
        resume: Checkpoint to continue from; its step counter is honoured

    Returns:
        Path of the final checkpoint

    Raises:
        UsageError: On an empty dataset or a shape mismatch
        CheckpointError: On I/O failures, naming the path
    """
    dataset = np.asarray(dataset, dtype=np.int64)
    if dataset.ndim != 3 or len(dataset) == 0:
        raise UsageError("dataset must be a non-empty [n, L, L] array of token grids")
    if dataset.shape[1:] != (model_config.side, model_config.side):
        raise UsageError(
            f"dataset grids {dataset.shape[1:]} do not match model side {model_config.side}"
        )
    if dataset.max() >= model_config.palette_size:
        raise UsageError("dataset holds tokens outside the model palette")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CheckpointError(f"cannot create output directory {out_dir}: {exc}") from exc

    if resume is not None:
        checkpoint = load_checkpoint(resume, kind="biretnet")
        params, stored_palette = model_from_checkpoint(checkpoint)
        if params.config.model_dump() != model_config.model_dump():
            raise CheckpointError(f"checkpoint {resume} was trained with a different model config")
        palette = palette or stored_palette
        optimizer = make_optimizer(params, cfg)
        optimizer.load_state(checkpoint.arrays, int(checkpoint.meta.get("step", 0)))
        logger.info("Resumed training", path=str(resume), step=optimizer.t)
    else:
        params = init_params(model_config, seed=cfg.seed)
        optimizer = make_optimizer(params, cfg)

    metrics_path = out_dir / "metrics.csv"
    if resume is None:
        try:
            metrics_path.unlink(missing_ok=True)
        except OSError as exc:
            raise CheckpointError(f"cannot reset metrics at {metrics_path}: {exc}") from exc
    chance = math.log(model_config.palette_size)
    metrics: Optional[TrainMetrics] = None
    for step in range(optimizer.t, cfg.steps):
        params, metrics = train_step(sample_batch(dataset, cfg, step), params, optimizer, cfg)
        _append_metrics(metrics_path, metrics)
        if metrics.step % cfg.log_every == 0 or metrics.step == cfg.steps:
            logger.info(
                "Training step",
                step=metrics.step,
                loss=round(metrics.mlm_loss, 4),
                acc=round(metrics.accuracy, 4),
                ms=round(metrics.ms_per_step, 1),
                chance=round(chance, 4),
            )
        if cfg.checkpoint_every and metrics.step % cfg.checkpoint_every == 0:
            _save(out_dir / f"step_{metrics.step:06d}.rckpt", params, palette, optimizer, cfg)

    final = _save(out_dir / "final.rckpt", params, palette, optimizer, cfg)
    if metrics is not None:
        logger.info(
            "Training finished",
            steps=metrics.step,
            loss=round(metrics.mlm_loss, 4),
            acc=round(metrics.accuracy, 4),
            chance=round(chance, 4),
            checkpoint=str(final),
        )
    return final
