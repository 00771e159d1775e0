"""Training loop: per-step uniform timestep sampling, fresh Gaussian noise,
hybrid loss, one Adam update; metrics CSV and periodic checkpoints.

Fully deterministic given the seed: batch indices, timesteps and noise all
come from one generator whose state is checkpointed, so a resumed run
reproduces the uninterrupted loss trajectory bit for bit.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, write_latest_pointer
from .data import Batch, SliceDataset, Split
from .errors import CheckpointError, ConfigError, ParameterError
from .loss import hybrid_loss
from .nn import Adam
from .schedule import NoiseSchedule, q_sample
from .unet import ConditioningBundle, Denoiser, Variant

METRICS_HEADER = ("step", "l_simple", "l_vlb", "total", "wallclock_s")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 150_000
    batch_size: int = 16
    learning_rate: float = 1e-4
    lambda_vlb: float = 0.001
    checkpoint_every: int = 50_000
    seed: int = 0
    variant: Variant = Variant.MASK_GUIDED
    ema_decay: float | None = None
    grad_clip: float | None = None
    log_every: int = 100

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.iterations < 0:
            raise ParameterError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if self.lambda_vlb < 0:
            raise ParameterError("lambda_vlb must be >= 0")
        if self.checkpoint_every < 1:
            raise ParameterError("checkpoint_every must be >= 1")
        if self.iterations > 0 and self.checkpoint_every > self.iterations:
            raise ParameterError("checkpoint_every must not exceed iterations")
        if self.ema_decay is not None and not (0.0 < self.ema_decay < 1.0):
            raise ParameterError("ema_decay must lie in (0,1)")

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "lambda_vlb": self.lambda_vlb,
            "checkpoint_every": self.checkpoint_every,
            "seed": self.seed,
            "variant": self.variant.value,
            "ema_decay": self.ema_decay,
            "grad_clip": self.grad_clip,
            "log_every": self.log_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: (Variant(v) if k == "variant" else v) for k, v in d.items()})


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    final_checkpoint: str
    metrics_path: str
    steps_run: int
    metrics: list = field(default_factory=list)


def make_bundle(batch: Batch, variant: Variant) -> ConditioningBundle:
    variant = Variant(variant)
    edge = batch.edge if variant == Variant.EDGE_GUIDED else None
    return ConditioningBundle(mask_onehot=batch.onehot, variant=variant, edge_map=edge)


def _write_metrics(path: str, rows: list):
    fresh = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(METRICS_HEADER)
        writer.writerows(rows)


def _checkpoint_from_state(denoiser, optimizer, schedule, config, step, rng) -> Checkpoint:
    return Checkpoint(
        model_config=denoiser.config.to_dict(),
        train_config=config.to_dict(),
        schedule_config={"T": schedule.T,
                         "beta_start": float(schedule.betas[0]),
                         "beta_end": float(schedule.betas[-1])},
        step=step,
        params={k: v.copy() for k, v in denoiser.state_dict().items()},
        optimizer=optimizer.state_dict(),
        ema={},
        rng_state=rng.bit_generator.state,
    )


def train(config: TrainConfig, dataset: SliceDataset, denoiser: Denoiser,
          schedule: NoiseSchedule, out_dir: str, *, start_step: int = 0,
          optimizer: Adam | None = None, rng: np.random.Generator | None = None) -> TrainResult:
    """Run optimizer steps start_step+1 .. config.iterations."""
    if denoiser.config.variant != config.variant:
        raise ConfigError(
            f"denoiser variant {denoiser.config.variant.value} != config variant {config.variant.value}"
        )
    records = dataset.split_records(Split.TRAIN)
    if not records and config.iterations > start_step:
        raise ParameterError("training split is empty")
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")

    if optimizer is None:
        optimizer = Adam(denoiser.named_parameters(), lr=config.learning_rate,
                         grad_clip=config.grad_clip)
    if rng is None:
        rng = np.random.default_rng([config.seed, 0xD1F])

    include_edges = config.variant == Variant.EDGE_GUIDED
    ema_params = None
    if config.ema_decay is not None:
        ema_params = {k: v.copy() for k, v in denoiser.state_dict().items()}

    def emit_checkpoint(step) -> str:
        ckpt = _checkpoint_from_state(denoiser, optimizer, schedule, config, step, rng)
        if ema_params is not None:
            ckpt.ema = {k: v.copy() for k, v in ema_params.items()}
        name = f"ckpt_{step}.bin"
        save_checkpoint(os.path.join(out_dir, name), ckpt)
        write_latest_pointer(out_dir, name)
        return os.path.join(out_dir, name)

    final_path = emit_checkpoint(start_step)
    t0 = time.time()
    pending: list = []
    all_rows: list = []
    n = len(records)
    with kernels.blas_limit():
        for step in range(start_step + 1, config.iterations + 1):
            idx = rng.integers(0, n, size=config.batch_size)
            batch = dataset.make_batch([records[i] for i in idx], include_edges=include_edges)
            t = rng.integers(1, schedule.T + 1, size=config.batch_size)
            eps = rng.standard_normal(batch.image.shape, dtype=np.float32)
            x_t = q_sample(schedule, batch.image, t, eps).astype(np.float32)

            cond = make_bundle(batch, config.variant)
            out = denoiser(x_t, t, cond)
            terms = hybrid_loss(schedule, batch.image, t, eps, out, config.lambda_vlb)
            l_simple, l_vlb, total = terms.as_floats()
            if not np.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}: l_simple={l_simple} l_vlb={l_vlb}"
                )

            optimizer.zero_grad()
            terms.total.backward()
            optimizer.step()

            if ema_params is not None:
                d = config.ema_decay
                for k, p in denoiser.state_dict().items():
                    ema_params[k] = d * ema_params[k] + (1.0 - d) * p

            row = (step, f"{l_simple:.8g}", f"{l_vlb:.8g}", f"{total:.8g}",
                   f"{time.time() - t0:.3f}")
            pending.append(row)
            all_rows.append(row)
            if step % config.log_every == 0:
                _write_metrics(metrics_path, pending)
                pending = []
            if step % config.checkpoint_every == 0:
                final_path = emit_checkpoint(step)

    if pending:
        _write_metrics(metrics_path, pending)
    if config.iterations > start_step and config.iterations % config.checkpoint_every != 0:
        final_path = emit_checkpoint(config.iterations)
    return TrainResult(final_checkpoint=final_path, metrics_path=metrics_path,
                       steps_run=max(0, config.iterations - start_step), metrics=all_rows)


def _config_diff(ckpt: Checkpoint, config: TrainConfig, denoiser_cfg: dict) -> list:
    diffs = []
    if ckpt.train_config.get("variant") != config.variant.value:
        diffs.append(f"variant: checkpoint={ckpt.train_config.get('variant')} "
                     f"config={config.variant.value}")
    for key in ("image_size", "base_width", "channel_multipliers", "num_mask_classes",
                "num_res_blocks_per_level", "attention_resolutions"):
        if ckpt.model_config.get(key) != denoiser_cfg.get(key):
            diffs.append(f"model.{key}: checkpoint={ckpt.model_config.get(key)} "
                         f"config={denoiser_cfg.get(key)}")
    return diffs


def resume(checkpoint_path: str, config: TrainConfig, dataset: SliceDataset,
           schedule: NoiseSchedule, denoiser: Denoiser, out_dir: str) -> TrainResult:
    """Restore parameters, optimizer moments and the rng stream, then continue
    to config.iterations."""
    ckpt = load_checkpoint(checkpoint_path)
    diffs = _config_diff(ckpt, config, denoiser.config.to_dict())
    if diffs:
        raise CheckpointError("checkpoint/config mismatch:\n  " + "\n  ".join(diffs))
    if ckpt.schedule_config.get("T") != schedule.T:
        raise CheckpointError(
            f"schedule mismatch: checkpoint T={ckpt.schedule_config.get('T')} vs {schedule.T}"
        )
    denoiser.load_state_dict(ckpt.params)
    optimizer = Adam(denoiser.named_parameters(), lr=config.learning_rate,
                     grad_clip=config.grad_clip)
    if ckpt.optimizer:
        optimizer.load_state_dict(ckpt.optimizer)
    rng = np.random.default_rng()
    if ckpt.rng_state is not None:
        rng.bit_generator.state = ckpt.rng_state

    # keep the metrics log contiguous: drop any rows past the restored step
    metrics_path = os.path.join(out_dir, "metrics.csv")
    if os.path.exists(metrics_path):
        with open(metrics_path) as fh:
            rows = list(csv.reader(fh))
        kept = [r for r in rows[1:] if r and int(r[0]) <= ckpt.step]
        with open(metrics_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
            writer.writerows(kept)

    return train(config, dataset, denoiser, schedule, out_dir,
                 start_step=ckpt.step, optimizer=optimizer, rng=rng)
