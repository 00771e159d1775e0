"""Command-line entry point: toy-gen, ingest, train, sample, eval, report.

Every run writes a resolved-config snapshot next to its outputs. Exit codes:
0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from . import data as datamod
from . import evaluation as evalmod
from .errors import SemdiffError
from .sample import sample_grid
from .train import resume as train_resume
from .train import train as train_run
from .unet import build_denoiser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="semdiff",
                     description="Mask-conditioned diffusion synthesis of CT slices")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("toy-gen", help="generate a deterministic toy phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--slices", type=int, default=6)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ingest", help="window/resize raw slices into a training manifest")
    p.add_argument("--manifest", required=True, help="raw JSONL manifest (may be HU-valued)")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--level", type=float, default=40.0)
    p.add_argument("--width", type=float, default=400.0)
    p.add_argument("--body-threshold", type=float, default=0.1)
    p.add_argument("--no-derive-body", action="store_true",
                   help="keep masks as-is instead of filling the body class")

    p = sub.add_parser("train", help="train a conditional denoiser")
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--out", default=None, help="output directory (default from config)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("sample", help="sample images conditioned on manifest masks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None, help="total samples (cycles masks)")
    p.add_argument("--n-per-mask", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=["train", "test"], default="test")

    p = sub.add_parser("eval", help="quality + correspondence evaluation")
    p.add_argument("--real", required=True)
    p.add_argument("--synth", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--oracle", choices=["toy", "external"], default="toy")
    p.add_argument("--oracle-cmd", default=None,
                   help="command for the external oracle (prints mask path)")
    p.add_argument("--extractor", default="hermetic",
                   help="'hermetic' or module:callable for FID features")
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("report", help="merge evaluation reports into one table")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", default=None, help="write the table here as well")
    return parser


def _cmd_toy_gen(args) -> int:
    records = datamod.generate_toy_dataset(args.subjects, args.slices, args.size, args.seed)
    manifest = datamod.save_dataset(records, args.out)
    cfg = cfgmod.default_config()
    cfg["data"].update({"manifest": manifest, "size": args.size, "subjects": args.subjects,
                        "slices_per_subject": args.slices, "seed": args.seed})
    cfgmod.snapshot_config(cfg, args.out)
    print(f"wrote {len(records)} slices to {manifest}")
    return 0


def _cmd_ingest(args) -> int:
    import json as _json

    base = os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(args.out, exist_ok=True)
    out_manifest = os.path.join(args.out, "manifest.jsonl")
    kept, flagged = 0, []
    with open(args.manifest) as fh, open(out_manifest, "w") as out:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            row = _json.loads(line)
            image = datamod.load_image_png(os.path.join(base, row["image_path"]),
                                           prewindowed=bool(row.get("prewindowed", False)),
                                           level=args.level, width=args.width)
            mask = datamod.load_mask_png(os.path.join(base, row["mask_path"]))
            image, mask = datamod.resize_pair(image, mask, args.size)
            if not args.no_derive_body:
                try:
                    mask = datamod.derive_body_class(image, mask, threshold=args.body_threshold)
                except datamod.EmptyBodyError:
                    flagged.append(f"{row['subject_id']}/{row['slice_index']}")
                    continue
            stem = f"{row['subject_id']}_{int(row['slice_index']):04d}"
            datamod.save_image_png(os.path.join(args.out, stem + "_img.png"), image)
            datamod.save_mask_png(os.path.join(args.out, stem + "_mask.png"), mask)
            out.write(_json.dumps({
                "subject_id": row["subject_id"], "slice_index": int(row["slice_index"]),
                "image_path": stem + "_img.png", "mask_path": stem + "_mask.png",
                "split": row.get("split", "train"), "prewindowed": True,
            }, sort_keys=True) + "\n")
            kept += 1
    cfg = cfgmod.default_config()
    cfg["data"].update({"manifest": out_manifest, "size": args.size,
                        "window_level": args.level, "window_width": args.width})
    cfgmod.snapshot_config(cfg, args.out)
    print(f"ingested {kept} slices to {out_manifest}")
    if flagged:
        print(f"flagged {len(flagged)} empty-body records: {', '.join(flagged[:8])}"
              + (" ..." if len(flagged) > 8 else ""))
    return 0


def _cmd_train(args) -> int:
    cfg = cfgmod.apply_overrides(cfgmod.load_config(args.config), args.set)
    out_dir = args.out or cfg["train"].get("out_dir") or "runs/latest"
    schedule = cfgmod.build_schedule(cfg)
    train_cfg = cfgmod.build_train_config(cfg)
    model_cfg = cfgmod.build_model_config(cfg)
    dataset = datamod.load_manifest(cfg["data"]["manifest"])
    denoiser = build_denoiser(model_cfg, seed=train_cfg.seed)
    cfg["train"]["out_dir"] = out_dir
    cfgmod.snapshot_config(cfg, out_dir)
    if args.resume:
        result = train_resume(args.resume, train_cfg, dataset, schedule, denoiser, out_dir)
    else:
        result = train_run(train_cfg, dataset, denoiser, schedule, out_dir)
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"metrics: {result.metrics_path}")
    return 0


def _cmd_sample(args) -> int:
    index = sample_grid(args.ckpt, args.manifest, args.out,
                        n_per_mask=args.n_per_mask, n_total=args.n,
                        seed=args.seed, split=datamod.Split(args.split))
    cfg = cfgmod.default_config()
    cfg["data"]["manifest"] = os.path.abspath(args.manifest)
    cfg["eval"]["sample_seed"] = args.seed
    cfgmod.snapshot_config(cfg, args.out)
    print(f"wrote {len(index['outputs'])} samples to {args.out}")
    if index["errors"]:
        print(f"{len(index['errors'])} files failed: {index['errors'][:3]}")
    return 0


def _cmd_eval(args) -> int:
    if args.oracle == "toy":
        oracle = evalmod.ToyBandOracle()
    else:
        if not args.oracle_cmd:
            raise SemdiffError("--oracle external requires --oracle-cmd")
        oracle = _FileOracle(evalmod.ExternalCommandOracle(args.oracle_cmd), args.synth)
    if args.extractor == "hermetic":
        extractor = evalmod.RandomProjectionExtractor()
    else:
        extractor = evalmod.load_external_extractor(args.extractor)
    report = evalmod.evaluate(args.real, args.synth, args.masks, oracle, extractor)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    evalmod.write_report_files(report, args.out)
    cfg = cfgmod.default_config()
    cfg["eval"].update({"oracle": args.oracle, "extractor": args.extractor,
                        "real": os.path.abspath(args.real),
                        "synth": os.path.abspath(args.synth)})
    cfgmod.snapshot_config(cfg, out_dir, name=os.path.basename(args.out) + ".config.toml")
    header, rows = evalmod.report_rows([report.to_dict()], ["eval"])
    print(evalmod.format_table(header, rows))
    return 0


class _FileOracle:
    """Bridges the path-based external oracle to the array interface by
    writing each image to a scratch PNG first."""

    def __init__(self, cmd_oracle, scratch_dir: str):
        self._oracle = cmd_oracle
        self._scratch = os.path.join(scratch_dir, "_oracle_scratch.png")

    def segment(self, image01: np.ndarray) -> np.ndarray:
        datamod.save_image_png(self._scratch, image01)
        return self._oracle.segment_file(self._scratch)

    def describe(self) -> dict:
        return self._oracle.describe()


def _cmd_report(args) -> int:
    reports, labels = [], []
    for path in args.inputs:
        with open(path) as fh:
            reports.append(json.load(fh))
        labels.append(os.path.splitext(os.path.basename(path))[0])
    header, rows = evalmod.report_rows(reports, labels)
    table = evalmod.format_table(header, rows)
    print(table)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table + "\n")
        with open(os.path.splitext(args.out)[0] + ".csv", "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(str(v) for v in row) + "\n")
    return 0


_COMMANDS = {
    "toy-gen": _cmd_toy_gen,
    "ingest": _cmd_ingest,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except SemdiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # unexpected failure still exits 2 with context
        import traceback

        traceback.print_exc()
        print(f"unexpected error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
