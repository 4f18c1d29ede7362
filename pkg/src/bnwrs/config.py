"""Experiment configuration: strict parsing of JSON/TOML config trees.

Unknown keys anywhere in the tree are errors; silent typos in sweep
configs are how wrong conclusions get published.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError
from .regularize import RegularizerConfig

__all__ = [
    "DatasetConfig",
    "OptimizerConfig",
    "ExperimentConfig",
    "SweepSpec",
    "load_config",
    "load_sweep_spec",
    "config_from_dict",
    "sweep_from_dict",
    "set_by_path",
]


def _check_keys(mapping: dict, allowed: set, where: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    k: int = 10
    dim: int = 32
    n: int = 2000
    seed: Optional[int] = None  # defaults to the experiment seed
    separation: float = 4.0
    placement: str = "axis"
    image_shape: Optional[tuple] = None  # reshape flat synthetic vectors to (C, H, W)
    images: Optional[str] = None
    labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None

    def validate(self) -> None:
        if self.kind not in ("synthetic", "idx"):
            raise ConfigError(f"dataset kind must be 'synthetic' or 'idx', got {self.kind!r}")
        if self.kind == "synthetic":
            if self.image_shape is not None:
                c, h, w = self.image_shape
                if c * h * w != self.dim:
                    raise ConfigError(
                        f"image_shape {self.image_shape} does not flatten to dim {self.dim}"
                    )
        else:
            for label, path in (("images", self.images), ("labels", self.labels)):
                if not path:
                    raise ConfigError(f"idx dataset needs '{label}' path")
                if not os.path.exists(path):
                    raise ConfigError(f"idx {label} file does not exist: {path}")
            for label, path in (("test_images", self.test_images), ("test_labels", self.test_labels)):
                if path and not os.path.exists(path):
                    raise ConfigError(f"idx {label} file does not exist: {path}")


@dataclass
class OptimizerConfig:
    kind: str = "sgdm"
    lr: float = 0.1
    momentum: float = 0.9  # beta1 for the adam family
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay_in_buffer: bool = True

    def validate(self) -> None:
        if self.kind not in ("sgd", "sgdm", "adam", "adamw", "adamp"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")


@dataclass
class ExperimentConfig:
    name: str = "run"
    seed: int = 0
    architecture: object = "mlp:32-64-64-10"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    batch_size: int = 50
    epochs: int = 10
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.1
    metrics_every: int = 10
    snapshot_epochs: tuple = ()
    holdout_fraction: float = 0.1
    track_slices: int = 0
    bn_epsilon: float = 1e-12
    bn_momentum: float = 0.1

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 (train-mode batchnorm), got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.metrics_every < 1:
            raise ConfigError(f"metrics_every must be >= 1, got {self.metrics_every}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError(f"holdout_fraction must be in (0,1), got {self.holdout_fraction}")
        if self.track_slices < 0:
            raise ConfigError(f"track_slices must be >= 0, got {self.track_slices}")
        self.dataset.validate()
        self.optimizer.validate()

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "seed": self.seed,
            "architecture": self.architecture,
            "dataset": {k: v for k, v in vars(self.dataset).items() if v is not None},
            "optimizer": dict(vars(self.optimizer)),
            "regularizer": {
                "mode": self.regularizer.mode,
                "lam": self.regularizer.lam,
                "tau": self.regularizer.tau,
                "normalize_output_layer": self.regularizer.normalize_output_layer,
            },
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "lr_decay_epochs": list(self.lr_decay_epochs),
            "lr_decay_factor": self.lr_decay_factor,
            "metrics_every": self.metrics_every,
            "snapshot_epochs": list(self.snapshot_epochs),
            "holdout_fraction": self.holdout_fraction,
            "track_slices": self.track_slices,
            "bn_epsilon": self.bn_epsilon,
            "bn_momentum": self.bn_momentum,
        }
        if self.regularizer.active_window is not None:
            d["regularizer"]["active_window"] = list(self.regularizer.active_window)
        if isinstance(d["dataset"].get("image_shape"), tuple):
            d["dataset"]["image_shape"] = list(d["dataset"]["image_shape"])
        return d

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]


_DATASET_KEYS = {"kind", "k", "dim", "n", "seed", "separation", "placement",
                 "image_shape", "images", "labels", "test_images", "test_labels"}
_OPTIMIZER_KEYS = {"kind", "lr", "momentum", "beta2", "epsilon", "decay_in_buffer"}
_REGULARIZER_KEYS = {"mode", "lam", "tau", "normalize_output_layer", "active_window"}
_EXPERIMENT_KEYS = {"name", "seed", "architecture", "dataset", "optimizer", "regularizer",
                    "batch_size", "epochs", "lr_decay_epochs", "lr_decay_factor",
                    "metrics_every", "snapshot_epochs", "holdout_fraction",
                    "track_slices", "bn_epsilon", "bn_momentum"}


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    _check_keys(raw, _EXPERIMENT_KEYS, "experiment config")

    ds_raw = dict(raw.get("dataset", {}))
    _check_keys(ds_raw, _DATASET_KEYS, "dataset config")
    if "image_shape" in ds_raw and ds_raw["image_shape"] is not None:
        ds_raw["image_shape"] = tuple(int(v) for v in ds_raw["image_shape"])
    dataset = DatasetConfig(**ds_raw)

    opt_raw = dict(raw.get("optimizer", {}))
    _check_keys(opt_raw, _OPTIMIZER_KEYS, "optimizer config")
    optimizer = OptimizerConfig(**opt_raw)

    reg_raw = dict(raw.get("regularizer", {}))
    _check_keys(reg_raw, _REGULARIZER_KEYS, "regularizer config")
    if "active_window" in reg_raw and reg_raw["active_window"] is not None:
        reg_raw["active_window"] = tuple(reg_raw["active_window"])
    regularizer = RegularizerConfig(**reg_raw)

    cfg = ExperimentConfig(
        name=str(raw.get("name", "run")),
        seed=int(raw.get("seed", 0)),
        architecture=raw.get("architecture", "mlp:32-64-64-10"),
        dataset=dataset,
        optimizer=optimizer,
        regularizer=regularizer,
        batch_size=int(raw.get("batch_size", 50)),
        epochs=int(raw.get("epochs", 10)),
        lr_decay_epochs=tuple(raw.get("lr_decay_epochs", ())),
        lr_decay_factor=float(raw.get("lr_decay_factor", 0.1)),
        metrics_every=int(raw.get("metrics_every", 10)),
        snapshot_epochs=tuple(raw.get("snapshot_epochs", ())),
        holdout_fraction=float(raw.get("holdout_fraction", 0.1)),
        track_slices=int(raw.get("track_slices", 0)),
        bn_epsilon=float(raw.get("bn_epsilon", 1e-12)),
        bn_momentum=float(raw.get("bn_momentum", 0.1)),
    )
    cfg.validate()
    return cfg


def _load_tree(path: str) -> dict:
    if path.endswith(".toml"):
        try:
            import tomllib  # type: ignore[import-not-found]
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file does not exist: {path}")
    return config_from_dict(_load_tree(path))


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepSpec:
    base: dict
    axes: dict  # dotted config path -> list of values
    replicas: int = 1
    budget: int = 256

    def validate(self) -> None:
        if self.replicas < 1:
            raise ConfigError(f"replicas must be >= 1, got {self.replicas}")
        total = self.replicas
        for values in self.axes.values():
            if not values:
                raise ConfigError("sweep axes must be non-empty lists")
            total *= len(values)
        if total > self.budget:
            raise ConfigError(f"sweep needs {total} runs, over the budget of {self.budget}")
        config_from_dict(self.base)  # fail fast on a bad base


_SWEEP_KEYS = {"base", "axes", "replicas", "budget"}


def sweep_from_dict(raw: dict) -> SweepSpec:
    _check_keys(raw, _SWEEP_KEYS, "sweep spec")
    spec = SweepSpec(
        base=dict(raw.get("base", {})),
        axes={str(k): list(v) for k, v in raw.get("axes", {}).items()},
        replicas=int(raw.get("replicas", 1)),
        budget=int(raw.get("budget", 256)),
    )
    spec.validate()
    return spec


def load_sweep_spec(path: str) -> SweepSpec:
    if not os.path.exists(path):
        raise ConfigError(f"sweep spec does not exist: {path}")
    return sweep_from_dict(_load_tree(path))


def set_by_path(tree: dict, dotted: str, value) -> None:
    """Set a nested config key like ``regularizer.lam`` in a raw dict."""
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"axis path {dotted!r} collides with a scalar at {part!r}")
    node[parts[-1]] = value
