"""Checkpoint archive: config as canonical JSON, named parameter tensors,
optimizer state and the training-step counter, all in one npz file.

Arrays round-trip bitwise; the rng state is carried in the JSON header so a
resumed run replays the exact noise/batch stream of an uninterrupted one.
"""

from __future__ import annotations

import json
import os
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    schedule_config: dict
    step: int
    params: dict
    optimizer: dict = field(default_factory=dict)
    ema: dict = field(default_factory=dict)
    rng_state: dict | None = None


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path: str, ckpt: Checkpoint):
    meta = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "schedule_config": ckpt.schedule_config,
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
    }
    arrays = {"__meta__": np.frombuffer(_canonical_json(meta).encode(), dtype=np.uint8)}
    for name, arr in ckpt.params.items():
        arrays["param/" + name] = arr
    for name, arr in ckpt.optimizer.items():
        arrays["opt/" + name] = np.asarray(arr)
    for name, arr in ckpt.ema.items():
        arrays["ema/" + name] = arr
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as data:
            if "__meta__" not in data:
                raise CheckpointError(f"{path}: not a checkpoint (missing header)")
            meta = json.loads(bytes(data["__meta__"]).decode())
            params, optimizer, ema = {}, {}, {}
            for key in data.files:
                if key.startswith("param/"):
                    params[key[6:]] = data[key]
                elif key.startswith("opt/"):
                    optimizer[key[4:]] = data[key]
                elif key.startswith("ema/"):
                    ema[key[4:]] = data[key]
    except (zipfile.BadZipFile, OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    return Checkpoint(
        model_config=meta["model_config"],
        train_config=meta["train_config"],
        schedule_config=meta["schedule_config"],
        step=int(meta["step"]),
        params=params,
        optimizer=optimizer,
        ema=ema,
        rng_state=meta.get("rng_state"),
    )


def write_latest_pointer(out_dir: str, filename: str):
    with open(os.path.join(out_dir, "ckpt_latest"), "w") as fh:
        fh.write(filename + "\n")


def read_latest_pointer(out_dir: str) -> str:
    pointer = os.path.join(out_dir, "ckpt_latest")
    if not os.path.exists(pointer):
        raise CheckpointError(f"no ckpt_latest pointer in {out_dir}")
    with open(pointer) as fh:
        return os.path.join(out_dir, fh.read().strip())
