"""Conditional ancestral sampling: the full reverse trajectory from pure
noise, steered by a conditioning bundle, plus file-producing sample grids.

The trajectory draws x_T first and one z per remaining step, so a fixed seed
pins the whole path; z is omitted at the final step (t=1).
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from . import autodiff as ad
from . import kernels
from .checkpoint import load_checkpoint
from .data import SCHEMA, Split, load_manifest, mask_to_edges, mask_to_onehot
from .errors import ParameterError, SemdiffError, ShapeError
from .schedule import NoiseSchedule, interpolate_variance, linear_schedule, reverse_step_mean
from .unet import ConditioningBundle, Denoiser, DenoiserConfig, Variant, build_denoiser


class SamplingDiverged(SemdiffError):
    def __init__(self, step: int):
        super().__init__(f"non-finite sample values at reverse step t={step}")
        self.step = step


def _tile_bundle(cond: ConditioningBundle, n: int) -> ConditioningBundle:
    b = cond.batch_size
    if b == n:
        return cond
    if b == 1:
        onehot = np.repeat(cond.mask_onehot, n, axis=0)
        edge = None if cond.edge_map is None else np.repeat(cond.edge_map, n, axis=0)
        return ConditioningBundle(mask_onehot=onehot, variant=cond.variant, edge_map=edge)
    raise ShapeError(f"bundle batch {b} incompatible with n={n} (must be 1 or n)")


def sample(denoiser: Denoiser, schedule: NoiseSchedule, cond: ConditioningBundle,
           n: int, seed: int, zero_variance: bool = False) -> np.ndarray:
    """Draw n images conditioned on the bundle; returns [n,1,H,W] in [0,1]."""
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    cond = _tile_bundle(cond, n)
    size = denoiser.config.image_size
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1, size, size), dtype=np.float32)
    with ad.no_grad(), kernels.blas_limit():
        aux_cache = denoiser.precompute_conditioning(cond)
        for t in range(schedule.T, 0, -1):
            out = denoiser(x, t, cond, aux_cache=aux_cache)
            mean = reverse_step_mean(schedule, x, t, out.eps_hat.data)
            if t > 1:
                var = interpolate_variance(schedule, t, out.v.data)
                if zero_variance:
                    x = mean
                else:
                    z = rng.standard_normal(x.shape, dtype=np.float32)
                    x = mean + np.sqrt(var) * z
            else:
                x = mean
            if not np.isfinite(x).all():
                raise SamplingDiverged(t)
            x = x.astype(np.float32, copy=False)
    x = np.clip(x, -1.0, 1.0)
    return ((x + 1.0) / 2.0).astype(np.float32)


def make_bundle_for_masks(masks: np.ndarray, variant: Variant,
                          num_classes: int = SCHEMA.num_classes) -> ConditioningBundle:
    """Bundle from a [B,H,W] stack of label masks, deriving edges as needed."""
    variant = Variant(variant)
    masks = np.asarray(masks)
    onehot = np.stack([mask_to_onehot(m, num_classes) for m in masks])
    edge = None
    if variant == Variant.EDGE_GUIDED:
        edge = np.stack([mask_to_edges(m) for m in masks])[:, None].astype(np.float32)
    return ConditioningBundle(mask_onehot=onehot, variant=variant, edge_map=edge)


def denoiser_from_checkpoint(checkpoint_path: str):
    """Rebuild (denoiser, schedule, checkpoint) from a checkpoint archive."""
    ckpt = load_checkpoint(checkpoint_path)
    config = DenoiserConfig.from_dict(ckpt.model_config)
    net = build_denoiser(config)
    net.load_state_dict(ckpt.params)
    sc = ckpt.schedule_config
    schedule = linear_schedule(int(sc["T"]), float(sc["beta_start"]), float(sc["beta_end"]))
    return net, schedule, ckpt


def _save_gray_png(path: str, img01: np.ndarray):
    Image.fromarray((np.clip(img01, 0.0, 1.0) * 255.0).round().astype(np.uint8), mode="L").save(path)


def _grid_image(rows: list) -> Image.Image:
    """Each row is (mask_rgb, synth_gray, real_gray or None); all same size."""
    h, w = rows[0][0].shape[:2]
    cols = 3
    canvas = Image.new("RGB", (cols * w + (cols - 1) * 2, len(rows) * h + (len(rows) - 1) * 2),
                       (30, 30, 30))
    for r, (mask_rgb, synth, real) in enumerate(rows):
        y = r * (h + 2)
        canvas.paste(Image.fromarray(mask_rgb, "RGB"), (0, y))
        canvas.paste(Image.fromarray((synth * 255).astype(np.uint8), "L").convert("RGB"), (w + 2, y))
        if real is not None:
            canvas.paste(Image.fromarray((real * 255).astype(np.uint8), "L").convert("RGB"),
                         (2 * (w + 2), y))
    return canvas


_GRID_COLORS = None


def _mask_rgb(mask: np.ndarray) -> np.ndarray:
    global _GRID_COLORS
    if _GRID_COLORS is None:
        rng = np.random.default_rng(2024)
        _GRID_COLORS = np.vstack([[0, 0, 0], [120, 120, 120],
                                  rng.integers(60, 255, (254, 3))]).astype(np.uint8)
    return _GRID_COLORS[np.asarray(mask, dtype=np.int64)]


def sample_grid(checkpoint_path: str, manifest_path: str, output_dir: str,
                n_per_mask: int = 1, seed: int = 0, n_total: int | None = None,
                split: Split = Split.TEST, batch_chunk: int = 16) -> dict:
    """Sample per-mask repeats (or cycle masks to n_total), write one PNG per
    sample plus an index mapping outputs to source masks, and a side-by-side
    grid (mask | synthetic | real). Returns the index structure."""
    net, schedule, _ = denoiser_from_checkpoint(checkpoint_path)
    dataset = load_manifest(manifest_path)
    records = dataset.split_records(split) or dataset.records
    if not records:
        raise ParameterError(f"manifest {manifest_path} has no records")
    os.makedirs(output_dir, exist_ok=True)

    jobs = []  # (record, repeat)
    if n_total is not None:
        for i in range(n_total):
            jobs.append((records[i % len(records)], i // len(records)))
    else:
        for rec in records:
            for rep in range(n_per_mask):
                jobs.append((rec, rep))

    index = {"checkpoint": os.path.abspath(checkpoint_path),
             "manifest": os.path.abspath(manifest_path),
             "seed": seed, "outputs": [], "errors": []}
    grid_rows = []
    for start in range(0, len(jobs), batch_chunk):
        chunk = jobs[start:start + batch_chunk]
        masks = np.stack([rec.mask for rec, _ in chunk])
        cond = make_bundle_for_masks(masks, net.config.variant)
        imgs = sample(net, schedule, cond, n=len(chunk), seed=seed + start)
        for (rec, rep), img in zip(chunk, imgs):
            name = f"{rec.subject_id}_{rec.slice_index:04d}__r{rep:02d}.png"
            entry = {"file": name, "subject_id": rec.subject_id,
                     "slice_index": rec.slice_index, "repeat": rep}
            try:
                _save_gray_png(os.path.join(output_dir, name), img[0])
                index["outputs"].append(entry)
            except OSError as exc:
                index["errors"].append({"file": name, "error": str(exc)})
            if len(grid_rows) < 8:
                grid_rows.append((_mask_rgb(rec.mask), img[0], rec.image))

    if grid_rows:
        _grid_image(grid_rows).save(os.path.join(output_dir, "grid.png"))
    with open(os.path.join(output_dir, "index.json"), "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
    return index
