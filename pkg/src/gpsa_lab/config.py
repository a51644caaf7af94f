"""Run configuration: JSON sections, dotted overrides and dataset construction."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import data as D
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass
class DataConfig:
    source: str = "synthetic"
    root: str = ""
    fraction: float = 1.0
    subsample_seed: int = 0
    num_classes: int = 10
    per_class: int = 50
    test_per_class: int = 20
    seed: int = 0
    idx_train_images: str = "train-images-idx3-ubyte"
    idx_train_labels: str = "train-labels-idx1-ubyte"
    idx_test_images: str = "t10k-images-idx3-ubyte"
    idx_test_labels: str = "t10k-labels-idx1-ubyte"

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10", "idx"):
            raise ConfigError(f"data.source must be synthetic, cifar10 or idx, got {self.source!r}")
        D.SubsampleSpec(self.fraction, self.subsample_seed)

    @property
    def subsample_spec(self) -> D.SubsampleSpec:
        return D.SubsampleSpec(self.fraction, self.subsample_seed)


@dataclass
class InspectConfig:
    checkpoint: str = ""
    layer: int = 0
    heads: list = field(default_factory=list)
    query: int = -1
    probe_size: int = 16
    mask_pos_embed: bool = False
    mask_attention: str = "none"

    def __post_init__(self):
        if self.mask_attention not in ("none", "content", "position"):
            raise ConfigError(f"inspect.mask_attention must be none, content or position, "
                              f"got {self.mask_attention!r}")


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "inspect": InspectConfig}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    inspect: InspectConfig

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _check_type(key: str, value, default, annotation: str):
    if value is None and "None" in annotation:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        out[f.name] = (f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default,
                       str(f.type))
    return out


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_config(raw: dict | None = None, overrides=()) -> RunConfig:
    """Merge a JSON dict and ``section.key=value`` overrides over the defaults.

    Unknown sections or keys and ill-typed values raise ConfigError naming the key.
    """
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    values = {name: {} for name in SECTIONS}
    items = []
    for section, body in raw.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config key {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        items += [(f"{section}.{k}", v) for k, v in body.items()]
    items += [parse_override(o) if isinstance(o, str) else o for o in overrides]
    for key, value in items:
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        defaults = _defaults(SECTIONS[section])
        if name not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        default, annotation = defaults[name]
        values[section][name] = _check_type(key, value, default, annotation)
    return RunConfig(**{name: cls(**values[name]) for name, cls in SECTIONS.items()})


def load_config(path=None, overrides=()) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return build_config(raw, overrides)


def _root(dc: DataConfig) -> Path:
    return Path(dc.root) if dc.root else D.data_root()


def load_datasets(dc: DataConfig, mc: ModelConfig) -> tuple[D.LabeledImageSet, D.LabeledImageSet]:
    """Train (subsampled per ``dc.fraction``) and test splits for a run."""
    if dc.source == "synthetic":
        train = D.synthetic_blobs(dc.num_classes, dc.per_class, mc.image_size, dc.seed,
                                  channels=mc.channels)
        test = D.synthetic_blobs(dc.num_classes, dc.test_per_class, mc.image_size, dc.seed + 1,
                                 channels=mc.channels, split="test", stats=train.stats)
    elif dc.source == "cifar10":
        train, test = D.load_cifar10(_root(dc))
    else:
        root = _root(dc)
        paths = [root / p for p in (dc.idx_train_images, dc.idx_train_labels,
                                    dc.idx_test_images, dc.idx_test_labels)]
        missing = [str(p) for p in paths if not p.is_file()]
        if missing:
            raise ConfigError(f"IDX files not found: {', '.join(missing)}")
        train = D.load_idx(paths[0], paths[1], "train", dc.num_classes)
        test = D.load_idx(paths[2], paths[3], "test", dc.num_classes, stats=train.stats)
    return D.subsample(train, dc.subsample_spec), test
