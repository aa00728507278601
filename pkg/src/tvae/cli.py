"""Command-line entry point: ``tvae {gen-data,train,predict,eval,ablate}``.

Any ``--section.key VALUE`` flag overrides the JSON config (values are parsed
as JSON, falling back to a plain string). Exit codes: 0 ok, 2 config error,
3 data error, 4 divergence.
"""
from __future__ import annotations

import argparse
import importlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from . import dataset_io, phantom
from .config import RunConfig, load_run_config, parse_value, with_overrides, write_run_config
from .errors import ConfigError, DataError, DivergenceError
from .metrics import (
    CopyLastPredictor,
    EvalReport,
    ModelPredictor,
    evaluate,
    sample_predictions,
    table_csv,
    uncertainty_map,
)
from .model import TVAE, assemble_volume
from .train import Trainer, load_model, save_checkpoint, split_validation

logger = logging.getLogger("tvae")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4

ABLATION_ROWS = [
    ("T-VAE (2D) + MSE Loss", {"recon_mode": "mse", "conv_dims": 2, "skip_mode": "partial"}),
    ("T-VAE (2D) + Edge-Aware Loss", {"recon_mode": "edge_aware", "conv_dims": 2, "skip_mode": "partial"}),
    ("T-VAE (3D-DCGAN) + MSE Loss", {"recon_mode": "mse", "conv_dims": 3, "skip_mode": "partial"}),
    ("T-VAE (3D-DCGAN) + Edge-Aware Loss", {"recon_mode": "edge_aware", "conv_dims": 3, "skip_mode": "partial"}),
    ("T-VAE (3D-UNet) + Edge-Aware Loss", {"recon_mode": "edge_aware", "conv_dims": 3, "skip_mode": "full"}),
]


# -- helpers -------------------------------------------------------------------


def _split_overrides(extra: Sequence[str]) -> dict:
    out = {}
    i = 0
    while i < len(extra):
        flag = extra[i]
        if not flag.startswith("--") or "." not in flag:
            raise ConfigError(f"unrecognized argument {flag!r}")
        key = flag[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for {flag}")
            raw = extra[i + 1]
            i += 2
        out[key] = parse_value(raw)
    return out


def _config(args, extra) -> RunConfig:
    return load_run_config(args.config, _split_overrides(extra))


def _split_dir(data: str | Path, split: str) -> Path:
    data = Path(data)
    if (data / "manifest.json").exists():
        return data
    if (data / split / "manifest.json").exists():
        return data / split
    raise DataError(f"no dataset found at {data} (expected manifest.json or {split}/manifest.json)")


def _find_subject(data: str | Path, subject: str):
    data = Path(data)
    dirs = [data] if (data / "manifest.json").exists() else [data / "test", data / "train"]
    for d in dirs:
        if not (d / "manifest.json").exists():
            continue
        manifest = dataset_io.load_manifest(d)
        for entry in manifest.subjects:
            if entry.subject_id == subject:
                voxels = dataset_io.read_tensor(d / entry.voxel_file, manifest.shape)
                mask = dataset_io.read_tensor(d / entry.mask_file, manifest.shape) > 0.5
                return phantom.VolumeSequence(voxels, mask, entry.subject_id, entry.has_tumor)
    raise DataError(f"subject {subject!r} not found under {data}")


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_montage(path: Path, rows: Sequence[Sequence[np.ndarray]], pad: int = 2) -> None:
    """Grid of equally sized [0,1] images, 8-bit grayscale."""
    h, w = rows[0][0].shape
    n_cols = max(len(r) for r in rows)
    canvas = np.zeros((len(rows) * (h + pad) + pad, n_cols * (w + pad) + pad), dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            canvas[y : y + h, x : x + w] = _to_u8(img)
    Image.fromarray(canvas, mode="L").save(path)


def _load_plugin(target: str | None):
    if not target:
        return None
    module, _, attr = target.partition(":")
    if not attr:
        raise ConfigError("--lpips-plugin must be module:callable")
    return getattr(importlib.import_module(module), attr)


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args, extra) -> int:
    cfg = _config(args, extra)
    out = Path(args.out)
    train_seeds, test_seeds = phantom.split_subject_seeds(cfg.phantom, cfg.data.n_subjects, cfg.data.split_fraction)
    for split, seeds in (("train", train_seeds), ("test", test_seeds)):
        dataset_io.save_dataset((phantom.generate_sequence(cfg.phantom, s) for s in seeds), out / split, split=split)
    write_run_config(cfg, out)
    print(f"{len(train_seeds)} train / {len(test_seeds)} test")
    return EXIT_OK


def train_model(cfg: RunConfig, data: str | Path, out: str | Path) -> tuple[TVAE, list[dict]]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_run_config(cfg, out)
    sequences = dataset_io.load_dataset(_split_dir(data, "train"), load_masks=False)
    train_set, val_set = split_validation(sequences, cfg.train.val_fraction, cfg.train.seed)
    torch.manual_seed(cfg.train.seed)
    model = TVAE(cfg.model)
    train_cfg = replace(cfg.train, checkpoint_dir=str(out / "checkpoints"))
    trainer = Trainer(model, train_cfg, cfg.loss)
    log = trainer.fit(train_set, val_set, log_path=out / "log.jsonl")
    save_checkpoint(out / "model", model=trainer.model)
    return trainer.model, log


def cmd_train(args, extra) -> int:
    cfg = _config(args, extra)
    _, log = train_model(cfg, args.data, args.out)
    if log:
        best = min(log, key=lambda r: r["val_total"])
        print(f"{len(log)} epochs; best val_total {best['val_total']:.6f} at epoch {best['epoch']}")
    else:
        print("0 epochs")
    return EXIT_OK


def cmd_predict(args, extra) -> int:
    model = load_model(args.checkpoint)
    seq = _find_subject(args.data, args.subject)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = dataset_io.preprocess_eval(seq.voxels)  # T, S, H, W
    n_slices = frames.shape[1]
    if model.cfg.conv_dims == 3:
        context = frames[:-1].unsqueeze(1).unsqueeze(2)
    else:
        context = frames[:-1].unsqueeze(2)  # C, S, 1, H, W
    pred = ModelPredictor(model)
    B = context.shape[1]
    mean_pred = pred(context, torch.zeros(B, model.cfg.z_dim))
    volume = mean_pred[0, 0] if model.cfg.conv_dims == 3 else assemble_volume(list(mean_pred[:, 0]), n_slices)
    stem = f"{seq.subject_id}_week{frames.shape[0]}_pred"
    dataset_io.write_tensor(out / f"{stem}.f32", volume.numpy())
    (out / f"{stem}.json").write_text(json.dumps({"shape": list(volume.shape), "dtype": dataset_io.DTYPE}) + "\n")

    samples = None
    if args.samples:
        s = sample_predictions(model, context, args.samples, seed=args.seed)
        samples = s[:, 0, 0] if model.cfg.conv_dims == 3 else s[:, :, 0]  # N, S, H, W

    lesion_counts = seq.lesion_mask[-1].sum(axis=(1, 2))
    if args.slices:
        rows_idx = [int(i) for i in args.slices.split(",")]
    elif lesion_counts.any():
        rows_idx = sorted(int(i) for i in np.argsort(-lesion_counts, kind="stable")[:4])
    else:
        rows_idx = [int(round(i)) for i in np.linspace(0, n_slices - 1, 4)]
    rows = []
    for s in rows_idx:
        row = [frames[w, s].numpy() for w in range(frames.shape[0])] + [volume[s].numpy()]
        if samples is not None:
            row += [samples[k, s].numpy() for k in range(samples.shape[0])]
            if samples.shape[0] >= 2:
                row.append(uncertainty_map(samples[:, s].numpy(), args.threshold))
        rows.append(row)
    write_montage(out / f"{seq.subject_id}_montage.png", rows)
    print(f"wrote {stem}.f32 shape {tuple(volume.shape)}")
    return EXIT_OK


def evaluate_checkpoint(cfg: RunConfig, checkpoint, data, baseline: str | None = None, lpips=None) -> EvalReport:
    test_set = dataset_io.load_dataset(_split_dir(data, "test"))
    if baseline == "copy-last":
        return evaluate(CopyLastPredictor(), test_set, cfg.eval, conv_dims=2, lpips=lpips)
    if baseline:
        raise ConfigError(f"unknown baseline {baseline!r}")
    if checkpoint is None:
        raise ConfigError("--checkpoint is required unless --baseline is given")
    model = load_model(checkpoint)
    return evaluate(ModelPredictor(model), test_set, cfg.eval, conv_dims=model.cfg.conv_dims, lpips=lpips)


def cmd_eval(args, extra) -> int:
    cfg = _config(args, extra)
    report = evaluate_checkpoint(cfg, args.checkpoint, args.data, args.baseline, _load_plugin(args.lpips_plugin))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = args.baseline or "T-VAE"
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv(name))
    agg = report.aggregate
    print(f"PSNR {agg['psnr']:.3f}  SSIM {agg['ssim']:.4f}" + (f"  LPIPS {agg['lpips']:.4f}" if "lpips" in agg else ""))
    return EXIT_OK


def parse_grid(filters: Sequence[str] | None) -> dict[str, str]:
    out = {}
    for item in filters or []:
        key, sep, value = item.partition("=")
        if not sep or key not in ("recon_mode", "conv_dims", "skip_mode"):
            raise ConfigError(f"bad --grid filter {item!r}")
        out[key] = value
    return out


def ablation_rows(grid: dict[str, str]) -> list[tuple[str, dict]]:
    return [(name, row) for name, row in ABLATION_ROWS if all(str(row[k]) == v for k, v in grid.items())]


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name.lower()).strip("_").replace("__", "_")


def run_ablation(cfg: RunConfig, data, out, grid: dict[str, str] | None = None, seeds: Sequence[int] = (0,)) -> list[dict]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_run_config(cfg, out)
    rows = []
    for name, variant in ablation_rows(grid or {}):
        per_seed = []
        for seed in seeds:
            row_cfg = with_overrides(
                cfg,
                {
                    "loss.recon_mode": variant["recon_mode"],
                    "model.conv_dims": variant["conv_dims"],
                    "model.skip_mode": variant["skip_mode"],
                    "train.seed": seed,
                },
            )
            run_dir = out / _slug(name) / f"seed{seed}"
            logger.info("ablation row %s seed %d", name, seed)
            train_model(row_cfg, data, run_dir)
            report = evaluate_checkpoint(row_cfg, run_dir / "model", data)
            (run_dir / "report.json").write_text(report.to_json())
            per_seed.append(report.table_row(name) | {"seed": seed})
        row = {"model": name, "seeds": list(seeds), "per_seed": per_seed}
        for key in ("PSNR", "SSIM", "LPIPS", "lesion_region_mse"):
            vals = [r[key] for r in per_seed if r[key] is not None]
            row[key] = float(np.mean(vals)) if vals else None
        rows.append(row)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    (out / "ablation.csv").write_text(table_csv(rows))
    return rows


def cmd_ablate(args, extra) -> int:
    cfg = _config(args, extra)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
    rows = run_ablation(cfg, args.data, args.out, parse_grid(args.grid), seeds)
    print(table_csv(rows), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tvae", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the phantom dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predict the last week of one subject")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--subject", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--samples", type=int, default=0, help="extra prior samples + uncertainty map")
    pr.add_argument("--slices", help="comma-separated slice indices for the montage")
    pr.add_argument("--threshold", type=float, default=0.1)
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="evaluate a checkpoint or baseline on the test split")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--baseline", choices=["copy-last"])
    e.add_argument("--lpips-plugin", help="module:callable scoring two [0,1] images")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train/evaluate the ablation grid")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--grid", action="append", help="filter, e.g. recon_mode=edge_aware (repeatable)")
    a.add_argument("--seeds", help="comma-separated training seeds")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if extra and args.command == "predict":
            raise ConfigError(f"unrecognized arguments {extra}")
        return args.func(args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
