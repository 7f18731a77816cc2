"""Run configuration files (YAML or JSON).

Example::

    seed: 0
    sigma: 0.1            # scalar or one value per axis
    data: toy             # directory with train/ and val/ sub-directories
    output: runs/toy
    model:
      channels: [64, 128, 256]
      slice_mode: deform
    training:
      epochs: 200
      lr: 0.001
      weight_decay: 0.0001

Relative paths are resolved against the directory of the config file.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .training import TrainConfig


class ConfigError(ValueError):
    pass


_TOP_KEYS = {"seed", "sigma", "data", "train", "val", "columns", "output", "model", "training", "reproducible"}


@dataclass
class RunConfig:
    sigma: float | list[float] = 0.1
    seed: int = 0
    data: Path | None = None
    train: list[Path] = field(default_factory=list)
    val: list[Path] = field(default_factory=list)
    columns: str | None = None
    output: Path = Path("run")
    model: dict = field(default_factory=dict)
    training: TrainConfig = field(default_factory=TrainConfig)
    reproducible: bool = True

    def train_files(self) -> list[Path]:
        if self.train:
            return self.train
        return _cloud_files(self.data / "train")

    def val_files(self) -> list[Path]:
        if self.val:
            return self.val
        return _cloud_files(self.data / "val") if self.data and (self.data / "val").is_dir() else []


def _cloud_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise ConfigError(f"data directory {directory} does not exist")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".xyz", ".txt", ".ply"))
    if not files:
        raise ConfigError(f"no cloud files in {directory}")
    return files


def parse_config(data: dict, base: Path = Path(".")) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping of keys to values")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig()
    if "sigma" in data:
        sigma = data["sigma"]
        values = sigma if isinstance(sigma, list) else [sigma]
        try:
            values = [float(s) for s in values]
        except (TypeError, ValueError):
            raise ConfigError(f"sigma must be a number or a list of numbers, got {sigma!r}") from None
        if any(not s > 0 for s in values):
            raise ConfigError(f"sigma must be positive, got {sigma!r}")
        cfg.sigma = values if isinstance(sigma, list) else values[0]
    if "seed" in data:
        cfg.seed = int(data["seed"])
    if data.get("data") is not None:
        cfg.data = base / data["data"]
    cfg.train = [base / p for p in data.get("train", [])]
    cfg.val = [base / p for p in data.get("val", [])]
    if cfg.data is None and not cfg.train:
        raise ConfigError("config needs either 'data' or a 'train' file list")
    cfg.columns = data.get("columns")
    if "output" in data:
        cfg.output = base / data["output"]
    model = data.get("model") or {}
    if not isinstance(model, dict):
        raise ConfigError("'model' must be a mapping")
    cfg.model = dict(model)
    training = dict(data.get("training") or {})
    training.setdefault("seed", cfg.seed)
    try:
        cfg.training = TrainConfig.from_dict(training)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad training section: {exc}") from None
    cfg.reproducible = bool(data.get("reproducible", True))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, base=path.parent)
