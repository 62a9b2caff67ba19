"""Run configuration: a strict flat text format with dotted keys.

Each non-comment line reads ``section.key = value``. Unknown or duplicate
keys are errors so typos in experiment sweeps fail loudly. A RunConfig
aggregates everything the pipeline commands need and knows how to build the
dataset, supernet config, and hyperparameters from itself.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, SplitSpec, load_cifar10, synth_dataset
from .derive import SelectionMode
from .errors import ConfigError
from .optim import TrainHyper
from .spectral import SpectralConfig
from .supernet import SupernetConfig


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got '{text}'")


def _parse_mode(text: str) -> SelectionMode:
    try:
        return SelectionMode(text)
    except ValueError:
        raise ConfigError(f"mode must be 'min' or 'max', got '{text}'") from None


def _parse_policy(text: str) -> str:
    if text == "min_val_loss":
        return text
    if text.startswith("fixed:"):
        try:
            int(text.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad fixed-epoch policy '{text}'") from None
        return text
    raise ConfigError(
        f"epoch policy must be 'min_val_loss' or 'fixed:<epoch>', got '{text}'"
    )


# key -> (parser, default); defaults of None mean "required when used".
SCHEMA: dict[str, tuple] = {
    "data.kind": (str, "synth"),
    "data.cifar_dir": (str, ""),
    "data.classes": (int, 4),
    "data.samples_per_class": (int, 250),
    "data.height": (int, 16),
    "data.width": (int, 16),
    "data.noise": (float, 0.1),
    "data.seed": (int, 0),
    "data.test_seed": (int, 1),
    "data.test_samples_per_class": (int, 100),
    "data.augment": (_parse_bool, False),
    "split.train_fraction": (float, 0.8),
    "split.seed": (int, 0),
    "net.cells": (int, 8),
    "net.nodes": (int, 7),
    "net.channels": (int, 16),
    "train.initial_lr": (float, 0.025),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 3e-4),
    "train.epochs": (int, 50),
    "train.batch_size": (int, 64),
    "spectral.target_norm": (float, 1.0),
    "spectral.iterations": (int, 5),
    "spectral.rank_iterations": (int, 50),
    "spectral.seed": (int, 0),
    "spectral.frobenius_mode": (str, "matrix"),
    "run.seed": (int, 0),
    "run.output_dir": (str, "run"),
    "run.dtype": (str, "float32"),
    "derive.mode": (_parse_mode, SelectionMode.MIN_STABLE_RANK),
    "derive.epoch_policy": (_parse_policy, "min_val_loss"),
}


def parse_config_text(text: str) -> dict[str, object]:
    """Strictly parse dotted-key lines into typed values."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(val)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for '{key}': {exc}") from exc
    return values


@dataclass
class RunConfig:
    """Everything one pipeline run needs, with resolved defaults."""

    values: dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        resolved = {key: default for key, (_, default) in SCHEMA.items()}
        resolved.update(self.values)
        self.values = resolved
        if self["data.kind"] not in ("synth", "cifar10"):
            raise ConfigError(
                f"data.kind must be 'synth' or 'cifar10', got '{self['data.kind']}'"
            )
        if self["run.dtype"] not in ("float32", "float64"):
            raise ConfigError("run.dtype must be 'float32' or 'float64'")
        if self["data.kind"] == "cifar10" and not self["data.cifar_dir"]:
            raise ConfigError("data.kind=cifar10 requires data.cifar_dir")

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def dtype(self):
        return np.float32 if self["run.dtype"] == "float32" else np.float64

    @property
    def num_classes(self) -> int:
        return 10 if self["data.kind"] == "cifar10" else int(self["data.classes"])

    @property
    def input_hw(self) -> tuple[int, int]:
        if self["data.kind"] == "cifar10":
            return (32, 32)
        return (int(self["data.height"]), int(self["data.width"]))

    def make_datasets(self) -> tuple[Dataset, Dataset]:
        """(train corpus, test corpus) for the configured source."""
        if self["data.kind"] == "cifar10":
            return load_cifar10(self["data.cifar_dir"], dtype=self.dtype)
        train = synth_dataset(
            classes=int(self["data.classes"]),
            samples_per_class=int(self["data.samples_per_class"]),
            height=int(self["data.height"]),
            width=int(self["data.width"]),
            seed=int(self["data.seed"]),
            noise=float(self["data.noise"]),
            dtype=self.dtype,
        )
        test = synth_dataset(
            classes=int(self["data.classes"]),
            samples_per_class=int(self["data.test_samples_per_class"]),
            height=int(self["data.height"]),
            width=int(self["data.width"]),
            seed=int(self["data.test_seed"]),
            noise=float(self["data.noise"]),
            dtype=self.dtype,
        )
        # Test images are normalized with the train statistics.
        test.mean, test.std = train.mean, train.std
        return train, test

    def make_supernet_config(self) -> SupernetConfig:
        return SupernetConfig(
            cells=int(self["net.cells"]),
            nodes=int(self["net.nodes"]),
            initial_channels=int(self["net.channels"]),
            num_classes=self.num_classes,
            input_channels=3,
            input_hw=self.input_hw,
        )

    def make_train_hyper(self) -> TrainHyper:
        return TrainHyper(
            initial_lr=float(self["train.initial_lr"]),
            momentum=float(self["train.momentum"]),
            weight_decay=float(self["train.weight_decay"]),
            epochs=int(self["train.epochs"]),
            batch_size=int(self["train.batch_size"]),
        )

    def make_spectral_config(self) -> SpectralConfig:
        return SpectralConfig(
            target_norm=float(self["spectral.target_norm"]),
            iterations=int(self["spectral.iterations"]),
            rank_iterations=int(self["spectral.rank_iterations"]),
            seed=int(self["spectral.seed"]),
            frobenius_mode=self["spectral.frobenius_mode"],
        )

    def make_split_spec(self) -> SplitSpec:
        return SplitSpec(
            train_fraction=float(self["split.train_fraction"]),
            seed=int(self["split.seed"]),
        )

    def to_text(self) -> str:
        lines = [f"{key} = {self._render(key)}" for key in SCHEMA]
        return "\n".join(lines) + "\n"

    def _render(self, key: str) -> str:
        value = self.values[key]
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, SelectionMode):
            return value.value
        return str(value)


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig(parse_config_text(text))


def config_from_text(text: str) -> RunConfig:
    return RunConfig(parse_config_text(text))


def ensure_output_dir(cfg: RunConfig, override: str | None = None) -> str:
    out = override or cfg["run.output_dir"]
    os.makedirs(out, exist_ok=True)
    return out
