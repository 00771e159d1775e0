"""Conditional denoising diffusion for mask-driven CT slice synthesis."""

from .schedule import (NoiseSchedule, forward_step, interpolate_variance, linear_schedule,
                       q_sample, reverse_step_mean)
from .unet import (ConditioningBundle, Denoiser, DenoiserConfig, DenoiserOutput, Variant,
                   build_denoiser, denoise, toy_config)
from .loss import LossTerms, gaussian_kl, hybrid_loss, l2_eps_loss, vlb_term
from .data import (LabelSchema, SCHEMA, SliceDataset, SliceRecord, Split, derive_body_class,
                   generate_toy_dataset, load_manifest, mask_to_edges, mask_to_onehot,
                   resize_pair, window_ct)
from .train import TrainConfig
from .evaluation import (EvalReport, RandomProjectionExtractor, ToyBandOracle, dice, evaluate,
                         extract_features, fid, psnr, ssim)

__version__ = "0.1.0"

# the train/sample loops live in their modules (semdiff.train.train,
# semdiff.sample.sample) to keep those module names importable
__all__ = [
    "NoiseSchedule", "linear_schedule", "q_sample", "forward_step", "reverse_step_mean",
    "interpolate_variance",
    "DenoiserConfig", "ConditioningBundle", "DenoiserOutput", "Denoiser", "Variant",
    "build_denoiser", "denoise", "toy_config",
    "LossTerms", "l2_eps_loss", "gaussian_kl", "vlb_term", "hybrid_loss",
    "LabelSchema", "SCHEMA", "SliceRecord", "SliceDataset", "Split", "window_ct",
    "derive_body_class", "mask_to_onehot", "mask_to_edges", "resize_pair",
    "generate_toy_dataset", "load_manifest",
    "TrainConfig",
    "EvalReport", "psnr", "ssim", "fid", "dice", "evaluate", "extract_features",
    "RandomProjectionExtractor", "ToyBandOracle",
    "__version__",
]
