"""Structured run configuration: one JSON file drives every command.

Unknown keys are rejected up front, and a content digest of the resolved
configuration is embedded in every artifact so that mismatched
config/checkpoint pairs are caught before any compute.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .data import GeneratorSpec
from .losses import LossConfig
from .robustness import PCS_GRID, SJN_GRID
from .training import AugmentParams, TrainConfig


class ConfigError(ValueError):
    """Raised for malformed or inconsistent run configurations."""


@dataclass(frozen=True)
class RobustnessConfig:
    sjn_grid: tuple = SJN_GRID
    pcs_grid: tuple = PCS_GRID
    seeds: tuple = (0, 1, 2)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_per_class: int = 250
    train_fraction: float = 0.8
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    robustness: RobustnessConfig = field(default_factory=RobustnessConfig)

    def resolved(self) -> dict:
        return {
            "seed": self.seed,
            "n_per_class": self.n_per_class,
            "train_fraction": self.train_fraction,
            "generator": dataclasses.asdict(self.generator),
            "train": dataclasses.asdict(self.train),
            "robustness": dataclasses.asdict(self.robustness),
        }

    def digest(self) -> str:
        canon = json.dumps(self.resolved(), sort_keys=True,
                           separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _build(cls, raw: dict, context: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in {context}: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {context}: {exc}") from exc


def parse_config(raw: dict, seed_override: int | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known = {"seed", "n_per_class", "train_fraction", "generator",
             "train", "loss", "augment", "robustness"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")

    seed = int(raw.get("seed", 0))
    if seed_override is not None:
        seed = int(seed_override)

    gen_raw = dict(raw.get("generator", {}))
    gen_raw.setdefault("seed", seed)
    generator = _build(GeneratorSpec, gen_raw, "generator section")
    try:
        generator.validate()
    except ValueError as exc:
        raise ConfigError(f"invalid generator section: {exc}") from exc

    loss = _build(LossConfig, raw.get("loss", {}), "loss section")
    augment = _build(AugmentParams, raw.get("augment", {}), "augment section")
    train_raw = dict(raw.get("train", {}))
    train_raw["seed"] = seed
    train_raw["loss"] = loss
    train_raw["augment"] = augment
    train = _build(TrainConfig, train_raw, "train section")
    robustness = _build(RobustnessConfig, raw.get("robustness", {}),
                        "robustness section")

    n_per_class = int(raw.get("n_per_class", 250))
    train_fraction = float(raw.get("train_fraction", 0.8))
    if n_per_class < 2:
        raise ConfigError("n_per_class must be >= 2")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must be in (0, 1)")
    return RunConfig(seed, n_per_class, train_fraction, generator, train,
                     robustness)


def load_config(path: str, seed_override: int | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(raw, seed_override)
