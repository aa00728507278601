"""Raw-tensor dataset storage, normalization and crop/flip/resize preprocessing.

On-disk layout of a dataset directory::

    manifest.json
    <subject_id>.voxels.f32   # little-endian float32, (week, slice, row, col)
    <subject_id>.mask.f32     # same layout, 0.0 / 1.0

The same raw-tensor convention (``write_tensor`` / ``read_tensor``) is
reused for model checkpoints.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CorruptDatasetError, DataError, VersionError
from .phantom import VolumeSequence

FORMAT_VERSION = 1
DTYPE = "f32le"
RESIZE_KERNEL = "bilinear"
CROP_SIZE = 96
OUT_SIZE = 64

_F32LE = np.dtype("<f4")


@dataclass
class SubjectEntry:
    subject_id: str
    has_tumor: bool
    voxel_file: str
    mask_file: str


@dataclass
class DatasetManifest:
    shape: tuple[int, int, int, int]
    subjects: list[SubjectEntry] = field(default_factory=list)
    split: str = "train"
    format_version: int = FORMAT_VERSION
    dtype: str = DTYPE
    resize_kernel: str = RESIZE_KERNEL

    def to_json(self) -> str:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CorruptDatasetError(f"manifest is not valid JSON: {exc}") from exc
        if d.get("format_version") != FORMAT_VERSION:
            raise VersionError(f"unsupported dataset format_version {d.get('format_version')!r}")
        if d.get("dtype") != DTYPE:
            raise CorruptDatasetError(f"unsupported dtype {d.get('dtype')!r}")
        subjects = [SubjectEntry(**s) for s in d["subjects"]]
        ids = [s.subject_id for s in subjects]
        if len(set(ids)) != len(ids):
            raise CorruptDatasetError("duplicate subject_id in manifest")
        return cls(
            shape=tuple(int(x) for x in d["shape"]),
            subjects=subjects,
            split=d["split"],
            format_version=d["format_version"],
            dtype=d["dtype"],
            resize_kernel=d.get("resize_kernel", RESIZE_KERNEL),
        )


def write_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    np.ascontiguousarray(array, dtype=_F32LE).tofile(path)


def read_tensor(path: str | os.PathLike, shape: Sequence[int]) -> np.ndarray:
    path = Path(path)
    expected = 4 * int(np.prod(shape))
    try:
        size = path.stat().st_size
    except FileNotFoundError as exc:
        raise CorruptDatasetError(f"missing tensor file {path}") from exc
    if size != expected:
        raise CorruptDatasetError(f"{path.name}: {size} bytes, expected {expected} for shape {tuple(shape)}")
    return np.fromfile(path, dtype=_F32LE).astype(np.float32, copy=False).reshape(shape)


def save_dataset(sequences: Iterable[VolumeSequence], directory: str | os.PathLike, split: str = "train") -> DatasetManifest:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest: DatasetManifest | None = None
    for seq in sequences:
        if manifest is None:
            manifest = DatasetManifest(shape=tuple(seq.voxels.shape), split=split)
        elif tuple(seq.voxels.shape) != manifest.shape:
            raise DataError(f"{seq.subject_id}: shape {seq.voxels.shape} differs from {manifest.shape}")
        if any(s.subject_id == seq.subject_id for s in manifest.subjects):
            raise DataError(f"duplicate subject_id {seq.subject_id}")
        entry = SubjectEntry(
            subject_id=seq.subject_id,
            has_tumor=bool(seq.has_tumor),
            voxel_file=f"{seq.subject_id}.voxels.f32",
            mask_file=f"{seq.subject_id}.mask.f32",
        )
        write_tensor(directory / entry.voxel_file, seq.voxels)
        write_tensor(directory / entry.mask_file, seq.lesion_mask)
        manifest.subjects.append(entry)
    if manifest is None:
        raise DataError("no sequences to save")
    (directory / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_manifest(directory: str | os.PathLike) -> DatasetManifest:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise CorruptDatasetError(f"no manifest.json in {directory}")
    return DatasetManifest.from_json(path.read_text())


def load_dataset(directory: str | os.PathLike, load_masks: bool = True) -> list[VolumeSequence]:
    directory = Path(directory)
    manifest = load_manifest(directory)
    out = []
    for s in manifest.subjects:
        voxels = read_tensor(directory / s.voxel_file, manifest.shape)
        if load_masks:
            mask = read_tensor(directory / s.mask_file, manifest.shape) > 0.5
        else:
            mask = np.zeros(manifest.shape, dtype=bool)
        out.append(VolumeSequence(voxels=voxels, lesion_mask=mask, subject_id=s.subject_id, has_tumor=s.has_tumor))
    return out


def normalize(volume: np.ndarray) -> np.ndarray:
    """Min-max scale one volume to [0, 1]; a constant volume maps to zeros."""
    volume = np.asarray(volume, dtype=np.float64)
    if not np.all(np.isfinite(volume)):
        raise DataError("volume contains NaN or Inf")
    lo, hi = volume.min(), volume.max()
    if hi == lo:
        return np.zeros(volume.shape, dtype=np.float32)
    return ((volume - lo) / (hi - lo)).astype(np.float32)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.float()
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def _resize(frames: torch.Tensor, size: int) -> torch.Tensor:
    # frames (..., H, W); bilinear, half-pixel centers, no antialias
    lead = frames.shape[:-2]
    flat = frames.reshape(-1, 1, *frames.shape[-2:])
    out = F.interpolate(flat, size=(size, size), mode="bilinear", align_corners=False)
    return out.reshape(*lead, size, size)


def crop_resize(frames, top: int, left: int, flip: bool = False, crop: int = CROP_SIZE, size: int = OUT_SIZE) -> torch.Tensor:
    """Crop ``crop``x``crop`` at (top, left) from the last two dims, optionally
    flip horizontally, then resize to ``size``x``size``. Same window for every frame."""
    frames = _as_tensor(frames)
    h, w = frames.shape[-2:]
    if h < crop or w < crop:
        raise DataError(f"frames {h}x{w} are smaller than the {crop}x{crop} crop")
    if not (0 <= top <= h - crop and 0 <= left <= w - crop):
        raise DataError(f"crop offset ({top},{left}) out of range")
    out = frames[..., top : top + crop, left : left + crop]
    if flip:
        out = torch.flip(out, dims=(-1,))
    return _resize(out, size)


def augment_train(slice_sequence, rng: np.random.Generator, crop: int = CROP_SIZE, size: int = OUT_SIZE) -> torch.Tensor:
    """Random crop + horizontal flip + resize, drawn once per sequence.

    Works for (T, H, W) slice sequences and (T, D, H, W) volume sequences;
    all frames (and slices) share the same window and flip.
    """
    frames = _as_tensor(slice_sequence)
    h, w = frames.shape[-2:]
    if h < crop or w < crop:
        raise DataError(f"frames {h}x{w} are smaller than the {crop}x{crop} crop")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    flip = bool(rng.random() < 0.5)
    return crop_resize(frames, top, left, flip, crop, size)


def preprocess_eval(slice_sequence, crop: int = CROP_SIZE, size: int = OUT_SIZE) -> torch.Tensor:
    frames = _as_tensor(slice_sequence)
    h, w = frames.shape[-2:]
    if h < crop or w < crop:
        raise DataError(f"frames {h}x{w} are smaller than the {crop}x{crop} crop")
    return crop_resize(frames, (h - crop) // 2, (w - crop) // 2, False, crop, size)


def preprocess_mask(mask, crop: int = CROP_SIZE, size: int = OUT_SIZE) -> torch.Tensor:
    """Eval-path geometry for binary masks (resized, then thresholded at 0.5)."""
    return preprocess_eval(_as_tensor(np.asarray(mask, dtype=np.float32)), crop, size) > 0.5
