"""Single JSON run configuration with dotted-path overrides."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .losses import LossWeights
from .metrics import EvalConfig
from .model import TVAEConfig
from .phantom import PhantomConfig
from .train import TrainConfig

SEED_ENV = "TVAE_SEED"


@dataclass
class DataConfig:
    n_subjects: int = 111
    split_fraction: float = 0.8
    frame_size: int = 64


@dataclass
class RunConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: TVAEConfig = field(default_factory=TVAEConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = {f.name: asdict(getattr(self, f.name)) for f in fields(self)}
        d["phantom"]["cortical_radius_range"] = list(self.phantom.cortical_radius_range)
        d["model"]["input_shape"] = list(self.model.input_shape)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {
    "phantom": PhantomConfig,
    "data": DataConfig,
    "model": TVAEConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _defaults() -> dict:
    return RunConfig().to_dict()


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(tree: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    if len(parts) != 2 or parts[0] not in tree:
        raise ConfigError(f"unknown config key {dotted!r}")
    section, key = parts
    if key not in tree[section]:
        raise ConfigError(f"unknown config key {dotted!r}")
    tree[section][key] = value


def build_run_config(
    file_values: Mapping[str, Any] | None = None,
    overrides: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    """Merge defaults <- file values <- dotted overrides <- environment."""
    tree = _defaults()
    explicit: set[str] = set()
    for section, values in (file_values or {}).items():
        if section not in tree or not isinstance(values, Mapping):
            raise ConfigError(f"unknown config section {section!r}")
        for key, value in values.items():
            _set_dotted(tree, f"{section}.{key}", value)
            explicit.add(f"{section}.{key}")
    for dotted, value in (overrides or {}).items():
        _set_dotted(tree, dotted, value)
        explicit.add(dotted)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            tree["train"]["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc

    # input_shape follows conv_dims and frame size unless given explicitly
    if "model.input_shape" not in explicit:
        size = tree["data"]["frame_size"]
        if tree["model"]["conv_dims"] == 3:
            tree["model"]["input_shape"] = [1, tree["phantom"]["n_slices"], size, size]
        else:
            tree["model"]["input_shape"] = [1, size, size]
    try:
        return RunConfig(**{name: _SECTIONS[name](**vals) for name, vals in tree.items()})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path: str | os.PathLike | None = None, overrides: Mapping[str, Any] | None = None, env=None) -> RunConfig:
    file_values = {}
    if path is not None:
        try:
            file_values = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return build_run_config(file_values, overrides, env)


def write_run_config(config: RunConfig, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(config.to_json())
    return path


def with_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Copy of ``config`` with dotted overrides applied (no environment)."""
    tree = copy.deepcopy(config.to_dict())
    for dotted, value in overrides.items():
        _set_dotted(tree, dotted, value)
    explicit_shape = "model.input_shape" in overrides
    if not explicit_shape and "model.conv_dims" in overrides:
        size = tree["data"]["frame_size"]
        tree["model"]["input_shape"] = (
            [1, tree["phantom"]["n_slices"], size, size] if tree["model"]["conv_dims"] == 3 else [1, size, size]
        )
    return build_run_config(tree, {"model.input_shape": tree["model"]["input_shape"]}, env={})
