"""Shared types, configuration, seeding and checkpoint I/O."""

from __future__ import annotations

import dataclasses
import json
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

CHECKPOINT_SCHEMA_VERSION = 1
PAD_INDEX = 0


class CheckpointError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    """Hyperparameters for the whole pipeline.

    ``level_sizes`` and ``level_widths`` list levels 1..5 in order. Levels 3-5
    form the low-resolution set and must share one size; level 2 is exactly
    twice that size.
    """

    image_size: int = 64
    level_sizes: tuple[int, ...] = (32, 16, 8, 8, 8)
    level_widths: tuple[int, ...] = (16, 32, 64, 64, 64)
    vocab_size: int = 18
    embed_dim: int = 32
    lang_hidden: int = 64
    d_s: int = 64
    d_m: int = 64
    max_tokens: int = 12
    retrieval_k: int = 20
    lr: float = 0.00025
    lr_power: float = 0.9
    weight_decay: float = 0.0005
    max_iter: int = 2000
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        # JSON round-trips tuples as lists
        object.__setattr__(self, "level_sizes", tuple(int(v) for v in self.level_sizes))
        object.__setattr__(self, "level_widths", tuple(int(v) for v in self.level_widths))
        self.validate()

    def validate(self) -> None:
        if len(self.level_sizes) != 5 or len(self.level_widths) != 5:
            raise ConfigError("level_sizes and level_widths need exactly 5 entries (levels 1..5)")
        if self.d_m % 4 != 0:
            raise ConfigError(f"d_m={self.d_m} must be divisible by 4 for pixel shuffle")
        lr_size = self.level_sizes[2]
        if any(s != lr_size for s in self.level_sizes[2:]):
            raise ConfigError(f"levels 3-5 must share one resolution, got {self.level_sizes[2:]}")
        if self.level_sizes[1] != 2 * lr_size:
            raise ConfigError(
                f"level 2 resolution {self.level_sizes[1]} must be exactly 2x the "
                f"low-resolution size {lr_size}"
            )
        expected = (self.image_size // 2, self.image_size // 4, self.image_size // 8)
        if self.image_size % 8 or tuple(self.level_sizes[:3]) != expected:
            raise ConfigError(
                f"image_size={self.image_size} implies level sizes {expected} for levels 1-3, "
                f"got {self.level_sizes[:3]}"
            )
        if self.retrieval_k < 1:
            raise ConfigError("retrieval_k must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.max_iter < 0:
            raise ConfigError("max_iter must be >= 0")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must cover at least padding and unknown tokens")

    @property
    def lr_size(self) -> int:
        return self.level_sizes[2]

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["level_sizes"] = list(self.level_sizes)
        d["level_widths"] = list(self.level_widths)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(data))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))


@dataclass(frozen=True, eq=False)
class SceneSample:
    """One (image, referent mask, expression) triple.

    ``image`` is float [H, W, 3] in [0, 1]; ``mask`` is uint8 [H, W] in {0, 1};
    ``tokens`` holds vocabulary indices without padding.
    """

    sample_id: str
    image: np.ndarray
    mask: np.ndarray
    tokens: tuple[int, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float32)
        mask = np.asarray(self.mask)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"{self.sample_id}: image must be [H, W, 3], got {image.shape}")
        if image.min() < 0.0 or image.max() > 1.0:
            raise ValueError(f"{self.sample_id}: image values must lie in [0, 1]")
        if mask.shape != image.shape[:2]:
            raise ValueError(f"{self.sample_id}: mask shape {mask.shape} != image shape {image.shape[:2]}")
        if not np.isin(mask, (0, 1)).all():
            raise ValueError(f"{self.sample_id}: mask must be binary")
        if mask.sum() < 1:
            raise ValueError(f"{self.sample_id}: mask has no foreground pixel")
        if len(self.tokens) == 0:
            raise ValueError(f"{self.sample_id}: empty token sequence")
        image.setflags(write=False)
        mask = mask.astype(np.uint8)
        mask.setflags(write=False)
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))

    def check_vocab(self, vocab_size: int) -> None:
        if max(self.tokens) >= vocab_size or min(self.tokens) < 0:
            raise ValueError(f"{self.sample_id}: token index outside vocabulary of size {vocab_size}")


@dataclass(frozen=True)
class FeaturePyramid:
    """Backbone outputs keyed by level 1..5, each [N, C, h, w]."""

    levels: dict[int, torch.Tensor]

    def __getitem__(self, level: int) -> torch.Tensor:
        return self.levels[level]

    def check(self, config: Config) -> None:
        for lvl in range(1, 6):
            t = self.levels[lvl]
            size, width = config.level_sizes[lvl - 1], config.level_widths[lvl - 1]
            if tuple(t.shape[1:]) != (width, size, size):
                raise ValueError(f"level {lvl}: expected {(width, size, size)}, got {tuple(t.shape[1:])}")


def seed_all(seed: int) -> np.random.Generator:
    """Seed python, numpy and torch; return a fresh numpy Generator."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def save_checkpoint(
    state: Mapping[str, Any],
    path: str | Path,
    config: Config | None = None,
    extra: Mapping[str, Any] | None = None,
) -> None:
    """Write parameters to a ``.npz`` archive.

    Layout: ``__schema_version__`` (int64 scalar), ``__config__`` and
    ``__extra__`` (JSON text, unicode scalars), and one float array per named
    parameter. No pickled objects, so any npz reader can load it.
    """
    arrays: dict[str, np.ndarray] = {}
    for name, value in state.items():
        if name.startswith("__"):
            raise CheckpointError(f"parameter name {name!r} collides with reserved keys")
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arrays[name] = np.asarray(value)
    arrays["__schema_version__"] = np.array(CHECKPOINT_SCHEMA_VERSION, dtype=np.int64)
    arrays["__config__"] = np.array(json.dumps(config.to_dict() if config else None))
    arrays["__extra__"] = np.array(json.dumps(dict(extra or {})))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], Config | None, dict]:
    """Inverse of :func:`save_checkpoint`: ``(params, config, extra)``."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if "__schema_version__" not in archive.files:
            raise CheckpointError(f"{path}: not a checkpoint archive (no schema version)")
        version = int(archive["__schema_version__"])
        if version != CHECKPOINT_SCHEMA_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint schema version mismatch: file has {version}, "
                f"expected {CHECKPOINT_SCHEMA_VERSION}"
            )
        cfg = json.loads(str(archive["__config__"]))
        extra = json.loads(str(archive["__extra__"]))
        params = {k: archive[k] for k in archive.files if not k.startswith("__")}
    return params, (Config.from_dict(cfg) if cfg is not None else None), extra


def env_seed(default: int) -> int:
    """Seed override from ``TVNET_SEED`` if set."""
    value = os.environ.get("TVNET_SEED")
    return int(value) if value not in (None, "") else default
