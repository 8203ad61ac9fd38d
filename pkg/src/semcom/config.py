"""Run configuration: one declarative JSON file, strictly validated.

Schema (all keys optional unless a command needs them; unknown keys are
rejected at every level)::

    {
      "dataset_dir": "data/desk",          # env SEMCOM_DATASET_ROOT overrides
      "image_size": [32, 32],              # H, W; both divisible by 4
      "backend": "oracle",                 # oracle | trivial | foundation-adapter
      "adapter_command": ["python", "seg.py"],   # foundation-adapter only
      "k_max": 4,
      "seed": 0,
      "bits_per_element": 8,
      "output_dir": "out",
      "variant": "semantic",               # semantic | baseline
      "interest_labels": ["disc", "box"],
      "integrity_threshold": 0.5,
      "content_threshold": 0.1,
      "channel": {"kind": "awgn", "snr_db": 10.0, "seed": 0},
      "train": {"phase": "crossed", "lr": 0.001, "epochs": 10, "batch": 16,
                 "snr_db_train": 10.0, "crossed_rounds": 3,
                 "convergence_eps": 0.0001, "seed": 0, "asc_mu": 0.05,
                 "checkpoint_every": 0},
      "model": {"widths": [32, 64], "mask_hidden": 64, "channel_hidden": 512}
    }

Command-line flags may override scalar fields through dotted paths, e.g.
``train.lr=0.01`` or ``channel.snr_db=20``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .channel import ChannelConfig
from .datasets import INTEREST_LABELS
from .training import TrainConfig

TRAIN_PHASES = ("asi", "channel", "semantic", "crossed", "asc")
VARIANTS = ("semantic", "baseline")

_TRAIN_KEYS = {"phase", "lr", "epochs", "batch", "snr_db_train", "crossed_rounds",
               "convergence_eps", "seed", "asc_mu", "channel_epochs", "checkpoint_every"}
_CHANNEL_KEYS = {"kind", "snr_db", "seed"}
_MODEL_KEYS = {"widths", "mask_hidden", "channel_hidden"}
_TOP_KEYS = {"dataset_dir", "image_size", "backend", "adapter_command", "k_max", "seed",
             "bits_per_element", "output_dir", "variant", "interest_labels",
             "integrity_threshold", "content_threshold", "channel", "train", "model"}

ENV_DATASET_ROOT = "SEMCOM_DATASET_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    widths: tuple[int, int] = (32, 64)
    mask_hidden: int = 64
    channel_hidden: int = 512


@dataclass
class RunConfig:
    dataset_dir: str = ""
    image_size: tuple[int, int] = (32, 32)
    backend: str = "oracle"
    adapter_command: list[str] = field(default_factory=list)
    k_max: int = 4
    seed: int = 0
    bits_per_element: int = 8
    output_dir: str = "out"
    variant: str = "semantic"
    interest_labels: list[str] = field(default_factory=lambda: list(INTEREST_LABELS))
    integrity_threshold: float = 0.5
    content_threshold: float = 0.1
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint_every: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if h % 4 or w % 4:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 4")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.k_max < 1:
            raise ConfigError(f"k_max must be >= 1, got {self.k_max}")
        if not (0.0 < self.integrity_threshold < 1.0):
            raise ConfigError(f"integrity_threshold {self.integrity_threshold} outside (0, 1)")

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def as_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["model"]["widths"] = list(self.model.widths)
        return d


def _reject_unknown(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where}: {sorted(unknown)}")


def build_run_config(raw: dict) -> RunConfig:
    _reject_unknown(raw, _TOP_KEYS, "top level")
    channel_raw = dict(raw.get("channel", {}))
    train_raw = dict(raw.get("train", {}))
    model_raw = dict(raw.get("model", {}))
    _reject_unknown(channel_raw, _CHANNEL_KEYS, "channel")
    _reject_unknown(train_raw, _TRAIN_KEYS, "train")
    _reject_unknown(model_raw, _MODEL_KEYS, "model")

    checkpoint_every = int(train_raw.pop("checkpoint_every", 0))
    phase = train_raw.get("phase", "crossed")
    if phase not in TRAIN_PHASES:
        raise ConfigError(f"unknown train phase {phase!r}; expected one of {TRAIN_PHASES}")

    dataset_dir = os.environ.get(ENV_DATASET_ROOT) or raw.get("dataset_dir", "")
    kwargs = {k: v for k, v in raw.items() if k not in ("channel", "train", "model", "dataset_dir")}
    if "image_size" in kwargs:
        kwargs["image_size"] = tuple(int(v) for v in kwargs["image_size"])
    if "widths" in model_raw:
        model_raw["widths"] = tuple(int(v) for v in model_raw["widths"])
    top_seed = int(raw.get("seed", 0))
    channel_raw.setdefault("seed", top_seed)
    train_raw.setdefault("seed", top_seed)
    try:
        cfg = RunConfig(
            dataset_dir=dataset_dir,
            channel=ChannelConfig(**channel_raw),
            train=TrainConfig(**train_raw),
            model=ModelConfig(**model_raw),
            checkpoint_every=checkpoint_every,
            **kwargs,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg.train.channel_kind = cfg.channel.kind
    return cfg


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse a config file and apply dotted-path scalar overrides."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    for dotted, value in (overrides or {}).items():
        _apply_override(raw, dotted, value)
    return build_run_config(raw)


def _apply_override(raw: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {dotted}: {p} is not a section")
    node[parts[-1]] = value


def parse_override_value(text: str):
    """CLI override values: try JSON first, fall back to the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text
