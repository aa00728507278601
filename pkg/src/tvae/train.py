"""Training loop: teacher forcing, Adam, early stopping, resumable checkpoints."""
from __future__ import annotations

import copy
import json
import logging
import math
import os
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import dataset_io
from .dataset_io import read_tensor, write_tensor
from .errors import ConfigError, CorruptDatasetError, DataError, DivergenceError, VersionError
from .losses import LossBreakdown, LossWeights, sequence_loss
from .model import TVAE, TVAEConfig
from .phantom import VolumeSequence

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_VAL_NOISE_OFFSET = 1_000_003


@dataclass
class TrainConfig:
    batch_size: int | None = None  # None -> 48 for 2D, 4 for 3D
    max_epochs: int = 200
    learning_rate: float = 0.002
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int = 10
    early_stop_min_delta: float = 0.0
    seed: int = 0
    val_fraction: float = 0.1
    slices_per_subject: int | None = None  # 2D only: random slice subset per subject per epoch
    augment: bool = True
    checkpoint_dir: str | None = None

    def __post_init__(self) -> None:
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")

    def resolved_batch_size(self, conv_dims: int) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 48 if conv_dims == 2 else 4


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improve: int = 0


# -- batches -----------------------------------------------------------------

Item = tuple[int, int | None]  # (sequence index, slice index or None for whole volume)


def make_items(sequences: Sequence[VolumeSequence], conv_dims: int, slices: Sequence[int] | None = None) -> list[Item]:
    if conv_dims == 3:
        return [(i, None) for i in range(len(sequences))]
    out = []
    for i, seq in enumerate(sequences):
        for s in slices if slices is not None else range(seq.voxels.shape[1]):
            out.append((i, int(s)))
    return out


def load_batch(
    sequences: Sequence[VolumeSequence], items: Sequence[Item], rng: np.random.Generator | None = None
) -> torch.Tensor:
    """Frames (T, B, 1, 64, 64) or (T, B, 1, D, 64, 64); ``rng`` enables augmentation."""
    frames = []
    for i, s in items:
        raw = sequences[i].voxels if s is None else sequences[i].voxels[:, s]
        frames.append(dataset_io.augment_train(raw, rng) if rng is not None else dataset_io.preprocess_eval(raw))
    return torch.stack(frames, dim=1).unsqueeze(2)


def split_validation(sequences: Sequence[VolumeSequence], fraction: float, seed: int):
    """Carve a by-subject validation subset off the training split."""
    n_val = int(round(len(sequences) * fraction))
    if fraction > 0:
        n_val = min(max(n_val, 1), len(sequences) - 1)
    order = np.random.default_rng(seed).permutation(len(sequences))
    val_idx = set(int(i) for i in order[:n_val])
    train = [s for i, s in enumerate(sequences) if i not in val_idx]
    val = [s for i, s in enumerate(sequences) if i in val_idx]
    return train, val


# -- trainer -----------------------------------------------------------------


class Trainer:
    """Owns the model, optimizer, RNG streams and early-stopping state."""

    def __init__(self, model: TVAE, config: TrainConfig, weights: LossWeights):
        self.model = model
        self.config = config
        self.weights = weights
        self.optimizer = torch.optim.Adam(
            model.parameters(),
            lr=config.learning_rate,
            betas=(config.adam_beta1, config.adam_beta2),
            eps=config.adam_eps,
        )
        self.noise_gen = torch.Generator().manual_seed(config.seed)
        self.data_rng = np.random.default_rng(config.seed)
        self.state = TrainState()
        self.batch_size = config.resolved_batch_size(model.cfg.conv_dims)

    def draw_noise(self, T: int, B: int) -> torch.Tensor:
        p = next(self.model.parameters())
        return torch.randn(T - 1, B, self.model.cfg.z_dim, generator=self.noise_gen).to(p.dtype)

    def train_step(self, frames: torch.Tensor, noise: torch.Tensor | None = None) -> LossBreakdown:
        """One Adam step on ``frames``; returns the pre-step loss (detached)."""
        self.model.train()
        if noise is None:
            noise = self.draw_noise(frames.shape[0], frames.shape[1])
        out = self.model.forward_train(frames, noise)
        try:
            loss = sequence_loss(out.predictions, frames, out.posteriors, out.priors, self.weights)
        except DataError as exc:
            raise DivergenceError(f"non-finite activations at step {self.state.step}: {exc}") from exc
        if not torch.isfinite(loss.total):
            raise DivergenceError(
                f"non-finite loss at step {self.state.step}: recon={float(loss.recon)}, kl={float(loss.kl)}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.total.backward()
        self.optimizer.step()
        self.state.step += 1
        return LossBreakdown(loss.recon.detach(), loss.kl.detach(), loss.total.detach())

    def epoch_items(self, sequences: Sequence[VolumeSequence]) -> list[Item]:
        conv_dims = self.model.cfg.conv_dims
        k = self.config.slices_per_subject
        if conv_dims == 3 or k is None:
            items = make_items(sequences, conv_dims)
        else:
            items = []
            for i, seq in enumerate(sequences):
                n = seq.voxels.shape[1]
                chosen = self.data_rng.choice(n, size=min(k, n), replace=False)
                items.extend((i, int(s)) for s in sorted(chosen))
        order = self.data_rng.permutation(len(items))
        return [items[j] for j in order]

    def run_epoch(self, sequences: Sequence[VolumeSequence]) -> dict[str, float]:
        items = self.epoch_items(sequences)
        sums = {"recon": 0.0, "kl": 0.0, "total": 0.0}
        for start in range(0, len(items), self.batch_size):
            chunk = items[start : start + self.batch_size]
            frames = load_batch(sequences, chunk, self.data_rng if self.config.augment else None)
            frames = frames.to(next(self.model.parameters()).dtype)
            loss = self.train_step(frames)
            for key, val in loss.item().items():
                sums[key] += val * len(chunk)
        return {k: v / len(items) for k, v in sums.items()}

    def validate(self, sequences: Sequence[VolumeSequence]) -> float:
        return validate(self.model, sequences, self.weights, self.batch_size, self.config.seed)

    def fit(
        self,
        train_set: Sequence[VolumeSequence],
        val_set: Sequence[VolumeSequence],
        log_path: str | os.PathLike | None = None,
    ) -> list[dict]:
        """Train until ``max_epochs`` or early stop; leaves the best-val weights loaded."""
        if not train_set or not val_set:
            raise DataError("fit needs non-empty train and validation sets")
        cfg = self.config
        log: list[dict] = []
        best_params = copy.deepcopy(self.model.state_dict())
        ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
        if ckpt_dir and self.state.best_epoch > 0 and (ckpt_dir / "best").exists():
            # resumed run: the best weights so far live in the best checkpoint
            best_params = load_model(ckpt_dir / "best").state_dict()
        log_file = open(log_path, "w") if log_path else None
        try:
            while self.state.epoch < cfg.max_epochs:
                t0 = time.perf_counter()
                train_stats = self.run_epoch(train_set)
                val_total = self.validate(val_set)
                self.state.epoch += 1
                record = {
                    "epoch": self.state.epoch,
                    "train_recon": train_stats["recon"],
                    "train_kl": train_stats["kl"],
                    "train_total": train_stats["total"],
                    "val_total": val_total,
                    "seconds": round(time.perf_counter() - t0, 3),
                }
                log.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
                logger.info("epoch %d train %.5f val %.5f", record["epoch"], record["train_total"], val_total)

                if val_total < self.state.best_val_loss - cfg.early_stop_min_delta:
                    self.state.best_val_loss = val_total
                    self.state.best_epoch = self.state.epoch
                    self.state.epochs_since_improve = 0
                    best_params = copy.deepcopy(self.model.state_dict())
                    if ckpt_dir:
                        save_checkpoint(ckpt_dir / "best", self)
                else:
                    self.state.epochs_since_improve += 1
                if ckpt_dir:
                    save_checkpoint(ckpt_dir / "last", self)
                if self.state.epochs_since_improve >= cfg.early_stop_patience:
                    logger.info("early stop after epoch %d (best %d)", self.state.epoch, self.state.best_epoch)
                    break
        finally:
            if log_file:
                log_file.close()
        self.model.load_state_dict(best_params)
        return log


@torch.no_grad()
def validate(
    model: TVAE,
    sequences: Sequence[VolumeSequence],
    weights: LossWeights,
    batch_size: int,
    seed: int = 0,
) -> float:
    """Mean teacher-forced total loss, no augmentation, pinned noise."""
    items = make_items(sequences, model.cfg.conv_dims)
    if not items:
        raise DataError("empty validation set")
    model.eval()
    gen = torch.Generator().manual_seed(seed + _VAL_NOISE_OFFSET)
    dtype = next(model.parameters()).dtype
    total = 0.0
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        frames = load_batch(sequences, chunk).to(dtype)
        noise = torch.randn(frames.shape[0] - 1, len(chunk), model.cfg.z_dim, generator=gen).to(dtype)
        out = model.forward_train(frames, noise)
        loss = sequence_loss(out.predictions, frames, out.posteriors, out.priors, weights)
        total += float(loss.total) * len(chunk)
    return total / len(items)


def fit(
    model: TVAE,
    train_set: Sequence[VolumeSequence],
    val_set: Sequence[VolumeSequence],
    config: TrainConfig,
    weights: LossWeights,
    log_path: str | os.PathLike | None = None,
) -> tuple[TVAE, list[dict]]:
    trainer = Trainer(model, config, weights)
    log = trainer.fit(train_set, val_set, log_path)
    return trainer.model, log


# -- checkpoints ---------------------------------------------------------------


def _tensor_file(name: str) -> str:
    return name + ".f32"


def save_checkpoint(path: str | os.PathLike, trainer: Trainer | None = None, model: TVAE | None = None) -> None:
    """Write a checkpoint directory atomically (temp dir, then rename).

    With only ``model`` the checkpoint holds weights; with ``trainer`` it also
    holds optimizer moments, RNG streams and early-stopping state.
    """
    model = trainer.model if trainer is not None else model
    if model is None:
        raise ValueError("need a trainer or a model")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=path.name + ".tmp", dir=path.parent))
    try:
        params = []
        for name, t in model.state_dict().items():
            write_tensor(tmp / _tensor_file(name), t.detach().cpu().numpy())
            params.append({"name": name, "shape": list(t.shape), "file": _tensor_file(name)})
        manifest = {
            "format_version": CHECKPOINT_VERSION,
            "dtype": dataset_io.DTYPE,
            "model_config": model.cfg.to_dict(),
            "params": params,
        }
        if trainer is not None:
            names = [n for n, _ in model.named_parameters()]
            opt_state = trainer.optimizer.state_dict()["state"]
            adam = {}
            for idx, st in sorted(opt_state.items()):
                name = names[idx]
                for key in ("exp_avg", "exp_avg_sq"):
                    write_tensor(tmp / _tensor_file(f"adam.{key}.{name}"), st[key].cpu().numpy())
                adam[name] = {"step": float(st["step"])}
            manifest.update(
                train_config=asdict(trainer.config),
                loss_weights=asdict(trainer.weights),
                train_state=asdict(trainer.state),
                adam=adam,
                rng={
                    "torch": trainer.noise_gen.get_state().numpy().tobytes().hex(),
                    "numpy": trainer.data_rng.bit_generator.state,
                },
            )
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if path.exists():
            trash = Path(tempfile.mkdtemp(prefix=path.name + ".old", dir=path.parent))
            os.replace(path, trash / "ckpt")
            os.replace(tmp, path)
            shutil.rmtree(trash)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _read_manifest(path: Path) -> dict:
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise CorruptDatasetError(f"no manifest.json in checkpoint {path}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptDatasetError(f"checkpoint manifest is not valid JSON: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint format_version {manifest.get('format_version')!r}")
    return manifest


def load_model(path: str | os.PathLike, model_config: TVAEConfig | None = None) -> TVAE:
    """Rebuild the model stored at ``path``; rejects a mismatching ``model_config``."""
    path = Path(path)
    manifest = _read_manifest(path)
    stored = TVAEConfig(**manifest["model_config"])
    if model_config is not None and model_config.to_dict() != stored.to_dict():
        raise ConfigError(f"checkpoint config {stored} does not match requested {model_config}")
    model = TVAE(stored)
    state = {}
    expected = model.state_dict()
    for p in manifest["params"]:
        if p["name"] not in expected or list(expected[p["name"]].shape) != p["shape"]:
            raise CorruptDatasetError(f"unexpected parameter {p['name']} {p['shape']}")
        state[p["name"]] = torch.from_numpy(read_tensor(path / p["file"], p["shape"]).copy())
    if set(state) != set(expected):
        raise CorruptDatasetError("checkpoint is missing parameters")
    model.load_state_dict(state)
    return model


def load_checkpoint(path: str | os.PathLike, model_config: TVAEConfig | None = None) -> Trainer:
    """Restore a resumable trainer (model, Adam moments, RNG streams, epoch state)."""
    path = Path(path)
    manifest = _read_manifest(path)
    if "train_state" not in manifest:
        raise CorruptDatasetError("checkpoint holds weights only; cannot resume training")
    model = load_model(path, model_config)
    trainer = Trainer(model, TrainConfig(**manifest["train_config"]), LossWeights(**manifest["loss_weights"]))
    trainer.state = TrainState(**manifest["train_state"])
    names = [n for n, _ in model.named_parameters()]
    shapes = dict(model.named_parameters())
    opt = trainer.optimizer.state_dict()
    opt["state"] = {}
    for idx, name in enumerate(names):
        if name not in manifest["adam"]:
            continue
        shape = list(shapes[name].shape)
        opt["state"][idx] = {
            "step": torch.tensor(manifest["adam"][name]["step"], dtype=torch.float32),
            "exp_avg": torch.from_numpy(read_tensor(path / _tensor_file(f"adam.exp_avg.{name}"), shape).copy()),
            "exp_avg_sq": torch.from_numpy(read_tensor(path / _tensor_file(f"adam.exp_avg_sq.{name}"), shape).copy()),
        }
    trainer.optimizer.load_state_dict(opt)
    rng = manifest["rng"]
    trainer.noise_gen.set_state(torch.tensor(list(bytes.fromhex(rng["torch"])), dtype=torch.uint8))
    trainer.data_rng.bit_generator.state = rng["numpy"]
    return trainer
