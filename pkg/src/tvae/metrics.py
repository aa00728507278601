"""PSNR / SSIM, sample diversity and uncertainty maps, and the evaluation harness."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .dataset_io import preprocess_eval, preprocess_mask
from .errors import ConfigError, DataError, ShapeError
from .model import TVAE
from .phantom import VolumeSequence

logger = logging.getLogger(__name__)

PSNR_IDENTICAL = math.inf  # sentinel returned for zero error

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

LpipsPlugin = Callable[[np.ndarray, np.ndarray], float]


@dataclass
class EvalConfig:
    n_samples: int = 10
    sample_mode: str = "prior_mean"
    uncertainty_threshold: float = 0.1
    report_best_of_n: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.sample_mode not in ("prior_sample", "prior_mean"):
            raise ConfigError(f"sample_mode must be 'prior_sample' or 'prior_mean', got {self.sample_mode!r}")
        if not 0.0 < self.uncertainty_threshold < 1.0:
            raise ConfigError("uncertainty_threshold must be in (0, 1)")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) with peak 1.0; identical inputs give ``PSNR_IDENTICAL``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable weighted mean over every fully-contained window
    rows = sliding_window_view(img, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def ssim(a, b, data_range: float = 1.0) -> float:
    """Single-scale SSIM (11x11 Gaussian window, sigma 1.5, valid positions).

    Arrays with more than two dims are treated as stacks of 2D images and the
    per-image values are averaged.
    """
    a, b = _pair(a, b)
    if a.ndim < 2:
        raise ShapeError("ssim needs at least 2D images")
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ShapeError(f"images {a.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if a.ndim > 2:
        flat_a = a.reshape(-1, *a.shape[-2:])
        flat_b = b.reshape(-1, *b.shape[-2:])
        return float(np.mean([ssim(x, y, data_range) for x, y in zip(flat_a, flat_b)]))
    if np.array_equal(a, b):
        return 1.0
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def lpips_plugin(a, b, plugin: LpipsPlugin | None) -> float | None:
    """Delegate to an external perceptual scorer; None if absent or failing."""
    if plugin is None:
        return None
    try:
        return float(plugin(np.asarray(a), np.asarray(b)))
    except Exception as exc:  # plugin faults must not abort evaluation
        logger.warning("LPIPS plugin failed: %s", exc)
        return None


def uncertainty_map(samples, threshold: float = 0.1) -> np.ndarray:
    """Per-pixel fraction of the N samples whose value exceeds ``threshold``."""
    samples = np.asarray(samples)
    if samples.shape[0] < 2:
        raise DataError(f"uncertainty_map needs at least 2 samples, got {samples.shape[0]}")
    return (samples > threshold).mean(axis=0)


def pairwise_diversity(samples) -> float:
    """Mean L2 distance over all unordered pairs of samples."""
    s = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    if len(s) < 2:
        return 0.0
    d = [np.linalg.norm(s[i] - s[j]) for i in range(len(s)) for j in range(i + 1, len(s))]
    return float(np.mean(d))


def boundary_regions(first_frame: np.ndarray, level: float = 0.5, dilate: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """(dilated cortical annulus, marrow interior) masks from a week-1 image."""
    bone = first_frame > level
    annulus = ndimage.binary_dilation(bone, iterations=dilate) if bone.any() else bone
    marrow = ndimage.binary_fill_holes(annulus) & ~annulus
    return annulus, marrow


# -- harness -----------------------------------------------------------------


class Predictor(Protocol):
    def __call__(self, context: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        """(C, B, ...) context and (B, z) noise -> (B, ...) next frame."""


class ModelPredictor:
    def __init__(self, model: TVAE):
        self.model = model
        self.z_dim = model.cfg.z_dim

    @torch.no_grad()
    def __call__(self, context: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        self.model.eval()
        dtype = next(self.model.parameters()).dtype
        return self.model.forward_generate(context.to(dtype), noise.unsqueeze(0).to(dtype), 1)[0].float()


class CopyLastPredictor:
    """Baseline: the next frame equals the last observed frame."""

    z_dim = 1

    def __call__(self, context: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        return context[-1].clone()


class OraclePredictor:
    """Upper bound for harness tests: returns the ground truth it was given."""

    z_dim = 1

    def __init__(self):
        self.truth: torch.Tensor | None = None

    def __call__(self, context: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        return self.truth.clone()


@dataclass
class EvalReport:
    per_sequence: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    aggregate_tumor: dict = field(default_factory=dict)
    diversity: float | None = None
    lesion_region_mse: float | None = None
    lesion_voxels: int = 0
    boundary_stability: dict | None = None
    lpips_status: str = "absent"
    averaging: str = "per-slice"
    sample_mode: str = "prior_mean"
    n_samples: int = 1

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def table_row(self, name: str) -> dict:
        row = {"model": name, "PSNR": self.aggregate.get("psnr"), "SSIM": self.aggregate.get("ssim")}
        row["LPIPS"] = self.aggregate.get("lpips")
        row["lesion_region_mse"] = self.lesion_region_mse
        return row

    def to_csv(self, name: str = "model") -> str:
        return table_csv([self.table_row(name)])


TABLE_COLUMNS = [("model", "Model"), ("PSNR", "PSNR↑"), ("SSIM", "SSIM↑"), ("LPIPS", "LPIPS↓"), ("lesion_region_mse", "LesionMSE↓")]


def table_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([title for _, title in TABLE_COLUMNS])
    for r in rows:
        w.writerow(["" if r.get(k) is None else (f"{r[k]:.6g}" if isinstance(r[k], float) else r[k]) for k, _ in TABLE_COLUMNS])
    return buf.getvalue()


def _mean_metrics(entries: Sequence[dict]) -> dict:
    out = {}
    for key in ("psnr", "ssim", "lpips", "psnr_best_of_n"):
        vals = [e[key] for e in entries if key in e]
        if vals:
            out[key] = float(np.mean(vals))
    return out


def _eval_frames(seq: VolumeSequence, conv_dims: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Eval-path frames (T, B, 1, ...) and the last week's lesion mask (B, ...)."""
    frames = preprocess_eval(seq.voxels)  # T, S, H, W
    mask = preprocess_mask(seq.lesion_mask[-1])  # S, H, W
    if conv_dims == 3:
        return frames.unsqueeze(1).unsqueeze(2), mask.unsqueeze(0)
    return frames.unsqueeze(2), mask


def evaluate(
    predictor: Predictor,
    test_set: Sequence[VolumeSequence],
    config: EvalConfig,
    conv_dims: int = 2,
    lpips: LpipsPlugin | None = None,
) -> EvalReport:
    """Warm up on weeks 1..T-1, generate week T, score per slice against ground truth."""
    if not test_set:
        raise DataError("empty test set")
    gen = torch.Generator().manual_seed(config.seed)
    report = EvalReport(sample_mode=config.sample_mode, n_samples=config.n_samples)
    lpips_failed = False
    sq_err_lesion = 0.0
    n_lesion = 0
    diversities = []
    var_annulus, var_marrow = [], []
    n_annulus, n_marrow = 0, 0

    for seq in test_set:
        frames, mask = _eval_frames(seq, conv_dims)
        context, truth = frames[:-1], frames[-1]
        B = truth.shape[0]
        if isinstance(predictor, OraclePredictor):
            predictor.truth = truth
        z_dim = predictor.z_dim
        draws = [torch.randn(B, z_dim, generator=gen) for _ in range(config.n_samples)]
        samples = torch.stack([predictor(context, d) for d in draws])  # N, B, 1, ...
        if config.sample_mode == "prior_mean":
            headline = predictor(context, torch.zeros(B, z_dim))
        else:
            headline = samples[0]

        truth_np = truth[:, 0].numpy()  # B, [D,] H, W
        head_np = headline[:, 0].numpy()
        samp_np = samples[:, :, 0].numpy()  # N, B, ...
        mask_np = mask.numpy()

        d = head_np - truth_np
        sq_err_lesion += float((d[mask_np] ** 2).sum())
        n_lesion += int(mask_np.sum())

        # flatten volumes into per-slice rows
        if conv_dims == 3:
            truth_sl, head_sl = truth_np[0], head_np[0]
            samp_sl = samp_np[:, 0]
            first_sl = context[0, 0, 0].numpy()
        else:
            truth_sl, head_sl, samp_sl = truth_np, head_np, samp_np
            first_sl = context[0, :, 0].numpy()

        for s in range(truth_sl.shape[0]):
            entry = {
                "subject_id": seq.subject_id,
                "slice_index": s,
                "has_tumor": bool(seq.has_tumor),
                "psnr": psnr(head_sl[s], truth_sl[s]),
                "ssim": ssim(head_sl[s], truth_sl[s]),
            }
            if config.report_best_of_n:
                entry["psnr_best_of_n"] = max(psnr(samp_sl[k, s], truth_sl[s]) for k in range(len(samp_sl)))
            if lpips is not None and not lpips_failed:
                val = lpips_plugin(head_sl[s], truth_sl[s], lpips)
                if val is None:
                    lpips_failed = True
                else:
                    entry["lpips"] = val
            report.per_sequence.append(entry)

            if config.n_samples >= 2:
                diversities.append(pairwise_diversity(samp_sl[:, s]))
                var = samp_sl[:, s].var(axis=0)
                ann, mar = boundary_regions(first_sl[s])
                var_annulus.append(float(var[ann].sum()))
                var_marrow.append(float(var[mar].sum()))
                n_annulus += int(ann.sum())
                n_marrow += int(mar.sum())

    if lpips_failed:
        for e in report.per_sequence:
            e.pop("lpips", None)
        report.lpips_status = "unavailable"
    elif lpips is not None:
        report.lpips_status = "ok"
    report.aggregate = _mean_metrics(report.per_sequence)
    report.aggregate_tumor = _mean_metrics([e for e in report.per_sequence if e["has_tumor"]])
    report.lesion_voxels = n_lesion
    report.lesion_region_mse = sq_err_lesion / n_lesion if n_lesion else None
    if diversities:
        report.diversity = float(np.mean(diversities))
        a = sum(var_annulus) / n_annulus if n_annulus else None
        m = sum(var_marrow) / n_marrow if n_marrow else None
        report.boundary_stability = {
            "annulus_variance": a,
            "marrow_variance": m,
            "annulus_below_marrow": (a < m) if a is not None and m is not None else None,
        }
    return report


def evaluate_model(
    model: TVAE, test_set: Sequence[VolumeSequence], config: EvalConfig, lpips: LpipsPlugin | None = None
) -> EvalReport:
    return evaluate(ModelPredictor(model), test_set, config, model.cfg.conv_dims, lpips)


def sample_predictions(
    model: TVAE, context: torch.Tensor, n_samples: int, seed: int = 0
) -> torch.Tensor:
    """N prior-sampled next frames, (N, B, ...)."""
    gen = torch.Generator().manual_seed(seed)
    pred = ModelPredictor(model)
    B = context.shape[1]
    return torch.stack([pred(context, torch.randn(B, model.cfg.z_dim, generator=gen)) for _ in range(n_samples)])
