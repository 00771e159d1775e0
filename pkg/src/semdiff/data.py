"""CT slice preprocessing, label schema, toy phantom generation and dataset
manifests.

Images travel as float arrays in [0,1]; the training iterator rescales to
[-1,1] at the batch boundary. Masks are integer label maps under LabelSchema
(0 = background outside the body, 1 = body, 2.. = organs).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from enum import Enum

import numpy as np
from PIL import Image

from . import kernels
from .errors import DataError, ParameterError, ShapeError

ORGAN_NAMES = (
    "spleen", "kidney_right", "kidney_left", "gallbladder", "esophagus",
    "liver", "stomach", "aorta", "inferior_vena_cava", "pancreas",
    "adrenal_right", "adrenal_left", "duodenum", "bladder", "prostate_uterus",
)


@dataclass(frozen=True)
class LabelSchema:
    class_names: tuple = ("background", "body") + ORGAN_NAMES

    def __post_init__(self):
        names = tuple(self.class_names)
        if len(set(names)) != len(names):
            raise DataError("class names must be unique")
        if names[0] != "background" or names[1] != "body":
            raise DataError("index 0 must be background and index 1 body")
        object.__setattr__(self, "class_names", names)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def organ_ids(self) -> tuple:
        return tuple(range(2, self.num_classes))

    def index_of(self, name: str) -> int:
        return self.class_names.index(name)


SCHEMA = LabelSchema()


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass
class SliceRecord:
    image: np.ndarray  # [H,W] float in [0,1]
    mask: np.ndarray  # [H,W] integer labels
    subject_id: str
    slice_index: int
    split: Split

    def __post_init__(self):
        self.split = Split(self.split)
        if self.image.shape != self.mask.shape:
            raise ShapeError(f"image {self.image.shape} vs mask {self.mask.shape}")


# ---------------------------------------------------------------------------
# preprocessing
def window_ct(hu_slice: np.ndarray, level: float = 40.0, width: float = 400.0) -> np.ndarray:
    """Clamp Hounsfield units to [level - width/2, level + width/2] and map
    the window onto [0,1]."""
    if width <= 0:
        raise ParameterError(f"window width must be positive, got {width}")
    hu = np.asarray(hu_slice, dtype=np.float64)
    lo = level - width / 2.0
    hi = level + width / 2.0
    return ((np.clip(hu, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def disk_offsets(radius: int) -> np.ndarray:
    offs = [(dy, dx)
            for dy in range(-radius, radius + 1)
            for dx in range(-radius, radius + 1)
            if dy * dy + dx * dx <= radius * radius]
    return np.asarray(offs, dtype=np.int64)


def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Fill cavities: complement components not touching the border."""
    inv = (np.asarray(mask) == 0).astype(np.uint8)
    labels, count = kernels.connected_components(inv)
    if count == 0:
        return mask.astype(np.uint8)
    border = np.zeros(count + 1, dtype=bool)
    border[labels[0, :]] = True
    border[labels[-1, :]] = True
    border[labels[:, 0]] = True
    border[labels[:, -1]] = True
    filled = mask.astype(np.uint8).copy()
    hole = (labels > 0) & ~border[labels]
    filled[hole] = 1
    return filled


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = kernels.connected_components(np.asarray(mask, dtype=np.uint8))
    if count == 0:
        return np.zeros_like(mask, dtype=np.uint8)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)
    sizes[0] = 0
    return (labels == sizes.argmax()).astype(np.uint8)


class EmptyBodyError(DataError):
    """No pixel qualified as body; the record should be flagged and skipped."""


def derive_body_class(windowed_image: np.ndarray, organ_mask: np.ndarray,
                      threshold: float = 0.1, closing_radius: int | None = None) -> np.ndarray:
    """Build the full label mask: organ labels kept, body filled in around
    them by thresholding + morphological closing + largest component + hole
    fill. Raises EmptyBodyError when nothing exceeds the threshold."""
    img = np.asarray(windowed_image)
    organs = np.asarray(organ_mask)
    if img.shape != organs.shape:
        raise ShapeError(f"image {img.shape} vs organ mask {organs.shape}")
    if closing_radius is None:
        closing_radius = max(1, round(3 * img.shape[0] / 256))
    candidates = ((img > threshold) | (organs > 0)).astype(np.uint8)
    if not candidates.any():
        raise EmptyBodyError("no pixel above threshold and no organ labels")
    offs = disk_offsets(closing_radius)
    closed = kernels.binary_erode(kernels.binary_dilate(candidates, offs), offs)
    body = largest_component(closed)
    if not body.any():
        raise EmptyBodyError("closing removed all candidate pixels")
    body = fill_holes(body)
    out = np.where(organs > 0, organs, np.where(body > 0, 1, 0))
    return out.astype(organs.dtype if organs.dtype.kind in "iu" else np.uint8)


def mask_to_onehot(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Exact one-hot [C,H,W]; channel sums are 1 everywhere."""
    m = np.asarray(mask)
    if m.min() < 0 or m.max() >= num_classes:
        bad = np.argwhere((m < 0) | (m >= num_classes))[0]
        raise DataError(
            f"label {m[tuple(bad)]} at pixel {tuple(int(v) for v in bad)} "
            f"outside 0..{num_classes - 1}"
        )
    onehot = np.zeros((num_classes,) + m.shape, dtype=np.float32)
    idx = np.indices(m.shape)
    onehot[(m.astype(np.int64),) + tuple(idx)] = 1.0
    return onehot


def mask_to_edges(mask: np.ndarray) -> np.ndarray:
    """Binary map of pixels whose 4-neighborhood crosses a label boundary."""
    return kernels.label_edges(np.ascontiguousarray(np.asarray(mask)))


def resize_pair(image: np.ndarray, mask: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear image resize, nearest-neighbor mask resize (labels never blend)."""
    if size < 8:
        raise ParameterError(f"target size must be >= 8, got {size}")
    img = np.asarray(image)
    m = np.asarray(mask)
    if img.shape == (size, size) and m.shape == (size, size):
        return img.copy(), m.copy()
    return kernels.bilinear_resize(img, size, size), kernels.nearest_resize(m, size, size)


# ---------------------------------------------------------------------------
# toy phantom generator
BACKGROUND_LEVEL = 0.02
BODY_LEVEL = 0.32
TOY_NOISE_AMPLITUDE = 0.006
# per-organ characteristic intensity bands, evenly spread above the body level
ORGAN_BANDS = {
    class_id: 0.45 + 0.54 * (class_id - 2) / (len(ORGAN_NAMES) - 1)
    for class_id in SCHEMA.organ_ids
}
# default organ subset for toy datasets: mutually separated bands so the
# intensity-band oracle stays unambiguous on imperfect samples
DEFAULT_TOY_ORGANS = (2, 5, 9, 12, 16)
MIN_BAND_GAP = 0.115


def class_band(class_id: int) -> float:
    if class_id == 0:
        return BACKGROUND_LEVEL
    if class_id == 1:
        return BODY_LEVEL
    return ORGAN_BANDS[class_id]


def _ellipse_mask(size: int, cy: float, cx: float, ry: float, rx: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    y = yy - cy
    x = xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u = (ca * x + sa * y) / rx
    w = (-sa * x + ca * y) / ry
    return (u * u + w * w) <= 1.0


def _smooth_noise(size: int, rng, amplitude: float) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, (max(2, size // 8), max(2, size // 8)))
    return amplitude * kernels.bilinear_resize(coarse, size, size)


def generate_toy_dataset(n_subjects: int, slices_per_subject: int, size: int, seed: int,
                         organ_classes: tuple = DEFAULT_TOY_ORGANS,
                         train_fraction: float = 0.75) -> list[SliceRecord]:
    """Deterministic elliptical phantoms: a body ellipse plus 2-5 organ blobs,
    each organ class painted in its characteristic intensity band with smooth
    low-amplitude noise. Splits are by subject."""
    if size < 32:
        raise ParameterError(f"toy size must be >= 32, got {size}")
    for cid in organ_classes:
        if cid not in SCHEMA.organ_ids:
            raise ParameterError(f"class id {cid} is not an organ class")
    records = []
    n_train = math.ceil(train_fraction * n_subjects)
    for s in range(n_subjects):
        srng = np.random.default_rng([seed, s])
        body_cy = size * (0.5 + srng.uniform(-0.04, 0.04))
        body_cx = size * (0.5 + srng.uniform(-0.04, 0.04))
        body_ry = size * srng.uniform(0.30, 0.38)
        body_rx = size * srng.uniform(0.32, 0.42)
        body_angle = srng.uniform(-0.2, 0.2)
        split = Split.TRAIN if s < n_train else Split.TEST
        for k in range(slices_per_subject):
            rng = np.random.default_rng([seed, s, k])
            scale = 1.0 + 0.08 * math.sin(math.pi * (k + 1) / (slices_per_subject + 1))
            body = _ellipse_mask(size, body_cy, body_cx, body_ry * scale,
                                 body_rx * scale, body_angle)
            mask = np.zeros((size, size), dtype=np.uint8)
            mask[body] = 1

            chosen: list[int] = []
            n_organs = int(rng.integers(2, 6))
            pool = list(organ_classes)
            rng.shuffle(pool)
            for cid in pool:
                if len(chosen) == n_organs:
                    break
                if all(abs(class_band(cid) - class_band(c)) >= MIN_BAND_GAP for c in chosen):
                    chosen.append(cid)

            moat = disk_offsets(2)  # keeps organ regions separable by thresholding
            for cid in chosen:
                for attempt in range(80):
                    hi = 0.15 - 0.065 * attempt / 80  # shrink until it fits
                    ry = size * rng.uniform(0.065, hi)
                    rx = size * rng.uniform(0.065, hi)
                    cy = body_cy + rng.uniform(-0.55, 0.55) * body_ry * scale
                    cx = body_cx + rng.uniform(-0.55, 0.55) * body_rx * scale
                    blob = _ellipse_mask(size, cy, cx, ry, rx, rng.uniform(0, math.pi))
                    if blob.sum() < 6:
                        continue
                    if not body[blob].all():
                        continue  # must sit fully inside the body
                    grown = kernels.binary_dilate(blob.astype(np.uint8), moat)
                    if (mask[grown > 0] > 1).any():
                        continue  # no overlap or contact with other organs
                    mask[blob] = cid
                    break

            image = np.full((size, size), BACKGROUND_LEVEL, dtype=np.float64)
            image[mask == 1] = BODY_LEVEL
            for cid in chosen:
                image[mask == cid] = class_band(cid)
            image += _smooth_noise(size, rng, TOY_NOISE_AMPLITUDE)
            image = np.clip(image, 0.0, 1.0).astype(np.float32)
            records.append(SliceRecord(image=image, mask=mask, subject_id=f"toy{s:03d}",
                                       slice_index=k, split=split))
    return records


# ---------------------------------------------------------------------------
# manifests and PNG storage
_MASK_PALETTE = None


def _mask_palette() -> list[int]:
    global _MASK_PALETTE
    if _MASK_PALETTE is None:
        rng = np.random.default_rng(12345)
        colors = [(0, 0, 0), (96, 96, 96)]
        colors += [tuple(int(v) for v in rng.integers(40, 256, 3)) for _ in range(254)]
        _MASK_PALETTE = [c for rgb in colors for c in rgb]
    return _MASK_PALETTE


def save_image_png(path: str, image01: np.ndarray):
    """16-bit grayscale PNG of a [0,1] image."""
    arr = np.clip(np.asarray(image01), 0.0, 1.0)
    Image.fromarray((arr * 65535.0).round().astype(np.uint16)).save(path)


def load_image_png(path: str, prewindowed: bool = True,
                   level: float = 40.0, width: float = 400.0) -> np.ndarray:
    """Read a grayscale PNG (8- or 16-bit); HU-valued files are 16-bit,
    store HU + 1024 and get windowed on load."""
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64)
    if prewindowed:
        scale = 255.0 if img.mode == "L" else 65535.0
        return (arr / scale).astype(np.float32)
    if img.mode == "L":
        raise DataError(f"{path}: HU-valued images must be 16-bit PNGs")
    return window_ct(arr - 1024.0, level=level, width=width)


def save_mask_png(path: str, mask: np.ndarray):
    """8-bit indexed PNG of a label mask."""
    m = np.asarray(mask)
    if m.max() > 255 or m.min() < 0:
        raise DataError("mask labels must fit 8-bit indexed PNG")
    img = Image.fromarray(m.astype(np.uint8), mode="P")
    img.putpalette(_mask_palette())
    img.save(path)


def load_mask_png(path: str) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint8)


def save_dataset(records: list[SliceRecord], out_dir: str) -> str:
    """Write records as PNG pairs plus a JSON-lines manifest; returns the
    manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w") as fh:
        for rec in records:
            stem = f"{rec.subject_id}_{rec.slice_index:04d}"
            image_rel = stem + "_img.png"
            mask_rel = stem + "_mask.png"
            save_image_png(os.path.join(out_dir, image_rel), rec.image)
            save_mask_png(os.path.join(out_dir, mask_rel), rec.mask)
            fh.write(json.dumps({
                "subject_id": rec.subject_id,
                "slice_index": rec.slice_index,
                "image_path": image_rel,
                "mask_path": mask_rel,
                "split": rec.split.value,
                "prewindowed": True,
            }, sort_keys=True) + "\n")
    return manifest_path


@dataclass
class Batch:
    image: np.ndarray  # [B,1,H,W] float32 in [-1,1]
    mask: np.ndarray  # [B,H,W] int64
    onehot: np.ndarray  # [B,C,H,W] float32
    edge: np.ndarray | None  # [B,1,H,W] float32, when requested


_REQUIRED_KEYS = ("subject_id", "slice_index", "image_path", "mask_path", "split", "prewindowed")


class SliceDataset:
    """In-memory dataset of preprocessed records with deterministic iteration."""

    def __init__(self, records: list[SliceRecord], schema: LabelSchema = SCHEMA):
        self.records = list(records)
        self.schema = schema
        for rec in self.records:
            if rec.mask.max(initial=0) >= schema.num_classes:
                raise DataError(f"record {rec.subject_id}/{rec.slice_index}: "
                                f"label {int(rec.mask.max())} outside schema")

    @classmethod
    def from_manifest(cls, manifest_path: str, schema: LabelSchema = SCHEMA) -> "SliceDataset":
        if not os.path.exists(manifest_path):
            raise DataError(f"manifest not found: {manifest_path}")
        base = os.path.dirname(os.path.abspath(manifest_path))
        records = []
        with open(manifest_path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{manifest_path}:{lineno}: invalid JSON ({exc})") from exc
                missing = [k for k in _REQUIRED_KEYS if k not in row]
                if missing:
                    raise DataError(f"{manifest_path}:{lineno}: missing fields {missing}")
                image = load_image_png(os.path.join(base, row["image_path"]),
                                       prewindowed=bool(row["prewindowed"]))
                mask = load_mask_png(os.path.join(base, row["mask_path"]))
                records.append(SliceRecord(
                    image=image, mask=mask, subject_id=str(row["subject_id"]),
                    slice_index=int(row["slice_index"]), split=Split(row["split"]),
                ))
        return cls(records, schema)

    def split_records(self, split: Split) -> list[SliceRecord]:
        split = Split(split)
        return [r for r in self.records if r.split == split]

    def iterate(self, split: Split, batch_size: int, shuffle_seed: int | None = None,
                include_edges: bool = False):
        """One pass over a split in deterministic order; a trailing short
        batch is yielded rather than dropped."""
        if batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
        recs = self.split_records(split)
        order = np.arange(len(recs))
        if shuffle_seed is not None:
            order = np.random.default_rng(shuffle_seed).permutation(len(recs))
        for start in range(0, len(recs), batch_size):
            chunk = [recs[i] for i in order[start:start + batch_size]]
            yield self.make_batch(chunk, include_edges=include_edges)

    def make_batch(self, records: list[SliceRecord], include_edges: bool = False) -> Batch:
        c = self.schema.num_classes
        image = np.stack([r.image for r in records])[:, None].astype(np.float32)
        mask = np.stack([r.mask for r in records]).astype(np.int64)
        onehot = np.stack([mask_to_onehot(r.mask, c) for r in records])
        edge = None
        if include_edges:
            edge = np.stack([mask_to_edges(r.mask) for r in records])[:, None].astype(np.float32)
        return Batch(image=image * 2.0 - 1.0, mask=mask, onehot=onehot, edge=edge)


def load_manifest(path: str, schema: LabelSchema = SCHEMA) -> SliceDataset:
    """Open a JSON-lines manifest as a dataset handle."""
    return SliceDataset.from_manifest(path, schema)
