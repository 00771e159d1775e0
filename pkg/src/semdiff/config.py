"""Run configuration: flat TOML sections [schedule] [model] [train] [data]
[eval], merged with command-line overrides, snapshotted next to outputs."""

from __future__ import annotations

import os

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .schedule import NoiseSchedule, linear_schedule
from .train import TrainConfig
from .unet import DenoiserConfig, Variant

SECTIONS = ("schedule", "model", "train", "data", "eval")

DEFAULTS: dict = {
    "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "model": {
        "image_size": 256,
        "base_width": 128,
        "channel_multipliers": [1, 1, 2, 2, 4, 4],
        "num_res_blocks_per_level": 2,
        "attention_resolutions": [16],
        "num_mask_classes": 17,
    },
    "train": {
        "iterations": 150_000,
        "batch_size": 16,
        "learning_rate": 1e-4,
        "lambda_vlb": 0.001,
        "checkpoint_every": 50_000,
        "seed": 0,
        "variant": "mask_guided",
        "log_every": 100,
    },
    "data": {"manifest": "data/manifest.jsonl"},
    "eval": {"oracle": "toy", "extractor": "hermetic", "extractor_dim": 16,
             "extractor_seed": 0},
}


def default_config() -> dict:
    return {s: dict(v) for s, v in DEFAULTS.items()}


def load_config(path: str | None) -> dict:
    """File values layered over defaults; unknown sections rejected."""
    cfg = default_config()
    if path is None:
        return cfg
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            user = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    for section, values in user.items():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: [{section}] must be a table")
        cfg[section].update(values)
    return cfg


def _parse_value(text: str):
    low = text.strip()
    if low.lower() in ("true", "false"):
        return low.lower() == "true"
    if low.startswith("[") and low.endswith("]"):
        inner = low[1:-1].strip()
        return [] if not inner else [_parse_value(v) for v in inner.split(",")]
    try:
        return int(low)
    except ValueError:
        pass
    try:
        return float(low)
    except ValueError:
        pass
    return low.strip("\"'")


def apply_overrides(cfg: dict, overrides: list) -> dict:
    """Each override is 'section.key=value'; flags beat file values."""
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        cfg[section][key] = _parse_value(value)
    return cfg


def _toml_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(x) for x in v) + "]"
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def snapshot_config(cfg: dict, out_dir: str, name: str = "resolved_config.toml") -> str:
    """Write the fully resolved configuration next to the run outputs."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    lines = []
    for section in SECTIONS:
        if section not in cfg:
            continue
        lines.append(f"[{section}]")
        for key, value in cfg[section].items():
            if value is None:
                continue
            lines.append(f"{key} = {_toml_scalar(value)}")
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
    return path


def build_schedule(cfg: dict) -> NoiseSchedule:
    s = cfg["schedule"]
    return linear_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]))


def build_model_config(cfg: dict) -> DenoiserConfig:
    m = cfg["model"]
    return DenoiserConfig(
        image_size=int(m["image_size"]),
        base_width=int(m["base_width"]),
        channel_multipliers=tuple(m["channel_multipliers"]),
        num_res_blocks_per_level=int(m["num_res_blocks_per_level"]),
        attention_resolutions=tuple(m["attention_resolutions"]),
        num_mask_classes=int(m["num_mask_classes"]),
        variant=Variant(cfg["train"]["variant"]),
        time_embed_multiplier=int(m.get("time_embed_multiplier", 4)),
    )


def build_train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t.pop("out_dir", None)
    return TrainConfig(
        iterations=int(t["iterations"]),
        batch_size=int(t["batch_size"]),
        learning_rate=float(t["learning_rate"]),
        lambda_vlb=float(t["lambda_vlb"]),
        checkpoint_every=int(t["checkpoint_every"]),
        seed=int(t["seed"]),
        variant=Variant(t["variant"]),
        ema_decay=t.get("ema_decay"),
        grad_clip=t.get("grad_clip"),
        log_every=int(t.get("log_every", 100)),
    )
