"""Experiment configuration (YAML with an explicit schema version)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from lesionforge.classifier import TrainConfig
from lesionforge.dataio import SynthConfig
from lesionforge.errors import DataError
from lesionforge.metrics import DEFAULT_BOOTSTRAP
from lesionforge.patching import PatchConfig
from lesionforge.pseudolabel import DEFAULT_T_GRID
from lesionforge.translation import LossWeights, TranslatorArch, TranslatorTrainConfig

SCHEMA_VERSION = 1
MODES = (
    "baseline",
    "augmented",
    "transfer_generator",
    "transfer_generator_plus_pseudolabeller",
    "transfer_pseudolabeller",
)
TRANSFER_MODES = MODES[2:]


@dataclass
class TranslatorConfig:
    arch: TranslatorArch = field(default_factory=TranslatorArch)
    train: TranslatorTrainConfig = field(default_factory=TranslatorTrainConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)


@dataclass
class TransferConfig:
    source_body_part: str = ""
    target_body_part: str = ""
    source_translator: str = ""
    source_classifier: str = ""
    # whether the target body part has its own generative setup; if not, the
    # patch scale factor is taken from the source translator's checkpoint
    target_has_generator: bool = False


@dataclass
class ExperimentConfig:
    mode: str = "augmented"
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    classifier: TrainConfig = field(default_factory=TrainConfig)
    blend_n: float = 2.0
    t_grid: list = field(default_factory=lambda: list(DEFAULT_T_GRID))
    bootstrap: int = DEFAULT_BOOTSTRAP
    transfer: TransferConfig = field(default_factory=TransferConfig)
    triptychs: int = 8
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise DataError(f"unsupported config schema_version {self.schema_version}")
        if self.mode not in MODES:
            raise DataError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode in TRANSFER_MODES:
            t = self.transfer
            if not (t.source_body_part and t.target_body_part):
                raise DataError("transfer modes need transfer.source_body_part and transfer.target_body_part")
            if self.mode != "transfer_generator" and not t.source_classifier:
                raise DataError(f"mode {self.mode} needs transfer.source_classifier")
            if self.mode != "transfer_pseudolabeller" and not t.source_translator:
                raise DataError(f"mode {self.mode} needs transfer.source_translator")
        if not self.t_grid or any(not 0.0 <= float(t) <= 1.0 for t in self.t_grid):
            raise DataError("t_grid must be a non-empty list of thresholds in [0, 1]")
        if self.blend_n <= 0:
            raise DataError("blend_n must be positive")
        if self.bootstrap < 100:
            raise DataError("bootstrap must be at least 100")
        self.synth.validate()
        self.patch.validate()
        self.classifier.validate()
        self.translator.arch.validate()

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict | None, where: str):
    data = dict(data or {})
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise DataError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else known[name].default
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "config")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise DataError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
