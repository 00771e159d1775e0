"""Quality and correspondence metrics: PSNR, SSIM, FID over pluggable
feature extractors, and per-class Dice through a segmentation oracle;
report generation in the layout of the training-iteration study tables.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import subprocess
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import (BACKGROUND_LEVEL, BODY_LEVEL, DEFAULT_TOY_ORGANS, ORGAN_BANDS, SCHEMA,
                   LabelSchema, class_band, load_image_png, load_mask_png)
from .errors import DataError, ParameterError, ShapeError

PSNR_CAP_DB = 99.0

# column order used by the comparison tables (organ short names)
TABLE_ORGAN_ORDER = (
    "spleen", "liver", "kidney_left", "kidney_right", "pancreas", "stomach",
    "aorta", "gallbladder", "esophagus", "adrenal_right", "adrenal_left",
    "duodenum", "inferior_vena_cava", "bladder", "prostate_uterus", "body",
)
_SHORT = {
    "spleen": "Sple.", "liver": "Liv.", "kidney_left": "Kid_l", "kidney_right": "Kid_r",
    "pancreas": "Panc.", "stomach": "Stom.", "aorta": "Aorta", "gallbladder": "Gall_bld",
    "esophagus": "Espo.", "adrenal_right": "Adr_r", "adrenal_left": "Adr_l",
    "duodenum": "Duod.", "inferior_vena_cava": "Cava.", "bladder": "Bladder",
    "prostate_uterus": "Prost.", "body": "Body",
}


def psnr(ref: np.ndarray, test: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; infinite for identical inputs."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ShapeError(f"psnr: shapes {ref.shape} and {test.shape} differ")
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def ssim(ref: np.ndarray, test: np.ndarray, data_range: float = 1.0,
         window_size: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM with a Gaussian window, valid-mode filtering."""
    a = np.asarray(ref, dtype=np.float64)
    b = np.asarray(test, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if min(a.shape) < window_size:
        raise ParameterError(f"image {a.shape} smaller than the {window_size}px window")
    w = _gaussian_window(window_size, sigma)
    mu1 = kernels.sepconv_valid(a, w)
    mu2 = kernels.sepconv_valid(b, w)
    s11 = kernels.sepconv_valid(a * a, w) - mu1 * mu1
    s22 = kernels.sepconv_valid(b * b, w) - mu2 * mu2
    s12 = kernels.sepconv_valid(a * b, w) - mu1 * mu2
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def fid(features_real: np.ndarray, features_synth: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of the two feature sets; the
    trace of the matrix square root comes from an eigendecomposition of the
    symmetrized covariance product."""
    fr = np.atleast_2d(np.asarray(features_real, dtype=np.float64))
    fs = np.atleast_2d(np.asarray(features_synth, dtype=np.float64))
    if fr.shape[1] != fs.shape[1]:
        raise ShapeError(f"feature dims differ: {fr.shape[1]} vs {fs.shape[1]}")
    if fr.shape[0] < 2 or fs.shape[0] < 2:
        raise ParameterError("need at least 2 feature rows per set for covariances")
    mu_r, mu_s = fr.mean(axis=0), fs.mean(axis=0)
    cov_r = np.atleast_2d(np.cov(fr, rowvar=False))
    cov_s = np.atleast_2d(np.cov(fs, rowvar=False))

    def trace_sqrt_product(c1, c2):
        evals, evecs = np.linalg.eigh(c1)
        if evals.min() < -1e-6:
            raise np.linalg.LinAlgError("covariance not PSD")
        root = (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
        m = root @ c2 @ root
        mv = np.linalg.eigvalsh((m + m.T) / 2.0)
        if mv.min() < -1e-6:
            raise np.linalg.LinAlgError("product matrix not PSD")
        return float(np.sqrt(np.clip(mv, 0.0, None)).sum())

    try:
        ts = trace_sqrt_product(cov_r, cov_s)
    except np.linalg.LinAlgError:
        warnings.warn("ill-conditioned covariance; regularizing with 1e-6 * I")
        eye = np.eye(cov_r.shape[0]) * 1e-6
        ts = trace_sqrt_product(cov_r + eye, cov_s + eye)
        cov_r = cov_r + eye
        cov_s = cov_s + eye
    diff = mu_r - mu_s
    return float(diff @ diff + np.trace(cov_r) + np.trace(cov_s) - 2.0 * ts)


def dice(pred_mask: np.ndarray, true_mask: np.ndarray, class_id: int) -> float:
    """Overlap score 2|P&G| / (|P|+|G|); 1.0 when both sets are empty."""
    p = np.asarray(pred_mask) == class_id
    g = np.asarray(true_mask) == class_id
    if p.shape != g.shape:
        raise ShapeError(f"dice: shapes {p.shape} and {g.shape} differ")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


# ---------------------------------------------------------------------------
# feature extractors
class RandomProjectionExtractor:
    """Hermetic embedding: bilinear pooling to a coarse grid followed by a
    seeded random projection. FID values carry no external meaning but keep
    every FID property testable without network weights."""

    def __init__(self, dim: int = 16, grid: int = 8, seed: int = 0):
        self.dim = dim
        self.grid = grid
        self.seed = seed
        rng = np.random.default_rng(seed)
        self._proj = rng.normal(0.0, 1.0 / np.sqrt(grid * grid), (grid * grid, dim))

    def __call__(self, images: np.ndarray) -> np.ndarray:
        imgs = np.asarray(images, dtype=np.float64)
        if imgs.ndim == 4:
            imgs = imgs[:, 0]
        if imgs.ndim != 3:
            raise ShapeError(f"expected [N,H,W] or [N,1,H,W], got {imgs.shape}")
        pooled = np.stack([kernels.bilinear_resize(im, self.grid, self.grid).ravel()
                           for im in imgs])
        return pooled @ self._proj

    def describe(self) -> dict:
        return {"kind": "random_projection", "dim": self.dim, "grid": self.grid,
                "seed": self.seed}


def load_external_extractor(spec: str):
    """Import 'module:callable' as a feature extractor (e.g. a pretrained
    embedding wrapper for paper-comparable FID numbers)."""
    if ":" not in spec:
        raise ParameterError(f"extractor spec must be 'module:callable', got {spec!r}")
    mod_name, fn_name = spec.split(":", 1)
    import importlib

    fn = getattr(importlib.import_module(mod_name), fn_name)
    if not callable(fn):
        raise ParameterError(f"{spec} is not callable")
    if not hasattr(fn, "describe"):
        fn.describe = lambda: {"kind": "external", "spec": spec}  # type: ignore[attr-defined]
    return fn


def extract_features(images: np.ndarray, extractor) -> np.ndarray:
    """Row i is the embedding of image i."""
    feats = np.asarray(extractor(images))
    if feats.ndim != 2 or feats.shape[0] != len(images):
        raise ShapeError(f"extractor returned {feats.shape} for {len(images)} images")
    return feats


# ---------------------------------------------------------------------------
# segmentation oracles
class ToyBandOracle:
    """Rule-based segmenter for toy phantoms: threshold the body, split
    bright pixels into connected regions and assign each region the organ
    class whose intensity band is nearest its mean."""

    def __init__(self, organ_classes: tuple = DEFAULT_TOY_ORGANS, min_region: int = 3):
        self.organ_classes = tuple(organ_classes)
        self.min_region = min_region
        self.body_cut = (BACKGROUND_LEVEL + BODY_LEVEL) / 2.0
        organ_floor = min(ORGAN_BANDS[c] for c in self.organ_classes)
        self.organ_cut = (BODY_LEVEL + organ_floor) / 2.0

    def segment(self, image01: np.ndarray) -> np.ndarray:
        img = np.asarray(image01, dtype=np.float64)
        mask = np.zeros(img.shape, dtype=np.uint8)
        mask[img > self.body_cut] = 1
        cand = (img > self.organ_cut).astype(np.uint8)
        labels, count = kernels.connected_components(cand)
        bands = np.asarray([class_band(c) for c in self.organ_classes])
        for comp in range(1, count + 1):
            region = labels == comp
            if int(region.sum()) < self.min_region:
                continue  # speckle stays body
            mean = img[region].mean()
            cid = self.organ_classes[int(np.argmin(np.abs(bands - mean)))]
            mask[region] = cid
        return mask

    def describe(self) -> dict:
        return {"kind": "toy_band", "organ_classes": list(self.organ_classes),
                "min_region": self.min_region}


class ExternalCommandOracle:
    """Adapter for real segmentation tools: runs `command <image.png>` and
    reads the mask PNG whose path the command prints on stdout."""

    def __init__(self, command: str):
        self.command = command

    def segment_file(self, image_path: str) -> np.ndarray:
        proc = subprocess.run(self.command.split() + [image_path],
                              capture_output=True, text=True, check=False)
        if proc.returncode != 0:
            raise DataError(f"oracle command failed on {image_path}: {proc.stderr.strip()}")
        out_path = proc.stdout.strip().splitlines()[-1]
        return load_mask_png(out_path)

    def describe(self) -> dict:
        return {"kind": "external_command", "command": self.command}


# ---------------------------------------------------------------------------
# full evaluation
@dataclass
class EvalReport:
    fid: float
    psnr_mean: float
    ssim_mean: float
    dsc_per_class: dict
    n_images: int
    config_fingerprint: str
    absent_classes: list = field(default_factory=list)
    empty_class_flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "fid": self.fid,
            "psnr_mean": self.psnr_mean,
            "ssim_mean": self.ssim_mean,
            "dsc_per_class": self.dsc_per_class,
            "n_images": self.n_images,
            "config_fingerprint": self.config_fingerprint,
            "absent_classes": self.absent_classes,
            "empty_class_flags": self.empty_class_flags,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _pair_key_from_name(name: str) -> str:
    stem = os.path.splitext(name)[0]
    if "__r" in stem:
        stem = stem.rsplit("__r", 1)[0]
    for suffix in ("_img", "_mask"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
    return stem


def _index_files(directory: str, role: str) -> dict:
    """Map pair keys to filenames; grayscale roles skip *_mask.png and the
    mask role skips *_img.png, so dataset directories can serve both."""
    out = {}
    for name in sorted(os.listdir(directory)):
        if not name.endswith(".png") or name == "grid.png":
            continue
        if role == "mask" and name.endswith("_img.png"):
            continue
        if role != "mask" and name.endswith("_mask.png"):
            continue
        out.setdefault(_pair_key_from_name(name), []).append(name)
    if not out:
        raise DataError(f"no PNG files found in {role} directory {directory}")
    return out


def evaluate(real_dir: str, synth_dir: str, mask_dir: str, oracle,
             extractor=None, schema: LabelSchema = SCHEMA) -> EvalReport:
    """Pairwise PSNR/SSIM (real vs synthetic per shared mask), FID over the
    two sets, and per-class DSC of oracle(synthetic) against the ground-truth
    masks (averaged over images whose ground truth contains the class)."""
    if extractor is None:
        extractor = RandomProjectionExtractor()
    synth_files = _index_files(synth_dir, "synthetic")
    real_files = _index_files(real_dir, "real")
    mask_files = _index_files(mask_dir, "mask")

    missing = [k for k in synth_files if k not in real_files or k not in mask_files]
    if missing:
        raise DataError("unmatched synthetic names (no real/mask counterpart): "
                        + ", ".join(sorted(missing)[:10]))

    psnrs, ssims = [], []
    real_imgs, synth_imgs = [], []
    dsc_sums = {cid: 0.0 for cid in range(1, schema.num_classes)}
    dsc_counts = {cid: 0 for cid in range(1, schema.num_classes)}
    empty_flags = []
    n_images = 0

    for key in sorted(synth_files):
        real_img = load_image_png(os.path.join(real_dir, real_files[key][0]))
        gt_mask = load_mask_png(os.path.join(mask_dir, mask_files[key][0]))
        for synth_name in synth_files[key]:
            synth_img = load_image_png(os.path.join(synth_dir, synth_name))
            if synth_img.shape != real_img.shape:
                raise ShapeError(f"{synth_name}: shape {synth_img.shape} vs real {real_img.shape}")
            n_images += 1
            p = psnr(real_img, synth_img)
            psnrs.append(min(p, PSNR_CAP_DB))
            ssims.append(ssim(real_img, synth_img))
            real_imgs.append(real_img)
            synth_imgs.append(synth_img)
            pred = oracle.segment(synth_img)
            for cid in range(1, schema.num_classes):
                if (gt_mask == cid).any():
                    d = dice(pred, gt_mask, cid)
                    dsc_sums[cid] += d
                    dsc_counts[cid] += 1
                    if not (pred == cid).any():
                        empty_flags.append({"class": schema.class_names[cid],
                                            "file": synth_name})

    feats_real = extract_features(np.stack(real_imgs), extractor)
    feats_synth = extract_features(np.stack(synth_imgs), extractor)
    fid_value = fid(feats_real, feats_synth)

    dsc = {}
    absent = []
    for cid in range(1, schema.num_classes):
        name = schema.class_names[cid]
        if dsc_counts[cid] > 0:
            dsc[name] = dsc_sums[cid] / dsc_counts[cid]
        else:
            absent.append(name)

    fingerprint_src = json.dumps({
        "oracle": oracle.describe() if hasattr(oracle, "describe") else str(type(oracle)),
        "extractor": extractor.describe() if hasattr(extractor, "describe") else "custom",
        "n_images": n_images,
    }, sort_keys=True)
    report = EvalReport(
        fid=fid_value,
        psnr_mean=float(np.mean(psnrs)),
        ssim_mean=float(np.mean(ssims)),
        dsc_per_class=dsc,
        n_images=n_images,
        config_fingerprint=hashlib.sha256(fingerprint_src.encode()).hexdigest()[:12],
        absent_classes=absent,
        empty_class_flags=empty_flags[:50],
    )
    return report


# ---------------------------------------------------------------------------
# tables
def _columns_for(reports: list) -> list:
    present = set()
    for r in reports:
        present.update(r["dsc_per_class"])
    return [n for n in TABLE_ORGAN_ORDER if n in present]


def report_rows(reports: list, labels: list) -> tuple[list, list]:
    """Header + one row per report: FID, PSNR, SSIM then per-class DSC (%)."""
    cols = _columns_for(reports)
    header = ["run", "FID", "PSNR", "SSIM"] + [_SHORT.get(c, c) for c in cols]
    rows = []
    for label, rep in zip(labels, reports):
        row = [label, f"{rep['fid']:.2f}", f"{rep['psnr_mean']:.2f}", f"{rep['ssim_mean']:.3f}"]
        for c in cols:
            v = rep["dsc_per_class"].get(c)
            row.append("-" if v is None else f"{100.0 * v:.1f}")
        rows.append(row)
    return header, rows


def format_table(header: list, rows: list) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(v).rjust(w) for v, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(str(v).rjust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)


def write_report_files(report: EvalReport, out_path: str):
    """report.json plus sibling .csv and .txt tables."""
    with open(out_path, "w") as fh:
        fh.write(report.to_json() + "\n")
    header, rows = report_rows([report.to_dict()], [os.path.basename(out_path)])
    base = os.path.splitext(out_path)[0]
    with open(base + ".csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    text = format_table(header, rows)
    if report.absent_classes:
        text += "\nabsent from ground truth (omitted): " + ", ".join(report.absent_classes)
    with open(base + ".txt", "w") as fh:
        fh.write(text + "\n")
