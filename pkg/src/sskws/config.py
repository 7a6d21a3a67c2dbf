"""Run configuration: nested key-value documents serialized as JSON.

Every field has a default except the seed, which is mandatory; loading fills
defaults in, and config snapshots written back out (including into checkpoint
headers) always contain every resolved value, so runs are self-documenting.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .audio import MfccConfig, SpecAugmentParams
from .model import KwtConfig, kwt_config

DETERMINISM_ENV_VAR = "SSKWS_DETERMINISTIC"

TASKS = ("train", "pretrain", "finetune", "evaluate", "ingest", "split")


@dataclass
class ModelSection:
    variant: str = "tiny"
    n_classes: int = 0  # 0 = infer from the classes file


@dataclass
class DataSection:
    data_root: str = "."
    train_manifest: str = ""
    val_manifest: str = ""
    test_manifest: str = ""
    classes_file: str = ""
    feature_cache: str = ""


@dataclass
class MfccSection:
    window_length: int = 480
    hop_length: int = 160
    n_mfcc: int = 40
    n_fft: int = 512
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def to_mfcc_config(self) -> MfccConfig:
        return MfccConfig(**dataclasses.asdict(self))


@dataclass
class AugmentSection:
    enabled: bool = True
    n_time_masks: int = 2
    max_time_mask: int = 25
    n_freq_masks: int = 2
    max_freq_mask: int = 7
    mask_value: float = 0.0

    def to_params(self) -> SpecAugmentParams:
        d = dataclasses.asdict(self)
        d.pop("enabled")
        return SpecAugmentParams(**d)


@dataclass
class TrainSection:
    epochs: int = 140
    batch_size: int = 512
    eta_max: float = 1e-3
    warmup_epochs: float = 10
    label_smoothing: float = 0.1
    weight_decay: float = 0.1


@dataclass
class PretrainSection:
    epochs: int = 200
    batch_size: int = 512
    eta_peak: float = 1e-3
    p_mask: float = 0.65
    n_mask: int = 10
    top_k: int = 8
    tau0: float = 0.999
    tau_end: float = 0.9999
    n_tau: int = 1000
    weight_decay: float = 0.1
    decay_mode: str = "coupled"
    clip_norm: float = 5.0


@dataclass
class RunConfig:
    seed: int
    task: str = "train"
    out_dir: str = "runs/out"
    deterministic: bool = True
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    mfcc: MfccSection = field(default_factory=MfccSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    train: TrainSection = field(default_factory=TrainSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_config(self, n_classes: int) -> KwtConfig:
        if self.model.n_classes and self.model.n_classes != n_classes:
            raise ValueError(f"config says {self.model.n_classes} classes but the classes file has {n_classes}")
        return kwt_config(self.model.variant, n_classes=n_classes, feature_dim=self.mfcc.n_mfcc)


_SECTIONS = {
    "model": ModelSection,
    "data": DataSection,
    "mfcc": MfccSection,
    "augment": AugmentSection,
    "train": TrainSection,
    "pretrain": PretrainSection,
}


def config_from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    if "seed" not in doc:
        raise ValueError("config is missing the mandatory 'seed' field")
    kwargs = {}
    for key, cls in _SECTIONS.items():
        section = doc.pop(key, {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(section) - known
        if unknown:
            raise ValueError(f"unknown keys in config section {key!r}: {sorted(unknown)}")
        kwargs[key] = cls(**section)
    top_known = {f.name for f in dataclasses.fields(RunConfig)} - set(_SECTIONS)
    unknown = set(doc) - top_known
    if unknown:
        raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
    return RunConfig(**doc, **kwargs)


def load_config(path: str | Path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def resolve_deterministic(cfg: RunConfig) -> bool:
    """Config value, unless the SSKWS_DETERMINISTIC env var forces it ("1"/"0")."""
    env = os.environ.get(DETERMINISM_ENV_VAR)
    if env is None or env == "":
        return cfg.deterministic
    if env not in ("0", "1"):
        raise ValueError(f"{DETERMINISM_ENV_VAR} must be '0' or '1', got {env!r}")
    return env == "1"


def validate_paths(cfg: RunConfig) -> None:
    """Every path referenced by the task must exist at launch."""
    checks = [("data_root", cfg.data.data_root)]
    if cfg.task in ("train", "finetune"):
        checks += [
            ("train_manifest", cfg.data.train_manifest),
            ("val_manifest", cfg.data.val_manifest),
            ("classes_file", cfg.data.classes_file),
        ]
    elif cfg.task == "pretrain":
        checks += [("train_manifest", cfg.data.train_manifest)]
    missing = [f"{name}={value!r}" for name, value in checks if not value or not Path(value).exists()]
    if missing:
        raise FileNotFoundError(f"config references missing paths: {', '.join(missing)}")
