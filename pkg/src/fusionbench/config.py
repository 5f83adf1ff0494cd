"""Experiment configuration: flat ``section.key = value`` lines with '#' comments.

Every key has a typed default below; a config file only lists overrides.
Values are parsed by the type of their default (comma lists become tuples).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .data import make_meta
from .errors import ConfigError
from .models import ArchConfig
from .training import TrainConfig

DEFAULTS = {
    "dataset.mode": "dissimilar",
    "dataset.n_classes": 8,
    "dataset.n_super": 4,
    "dataset.n_per_class": 500,
    "dataset.image_size": 32,
    "dataset.seed": 0,
    "dataset.train_fraction": 0.75,
    "dataset.cifar_path": "",
    "model.widths": (8, 16),
    "model.output_dim": 64,
    "model.fg_seed": 1,
    "model.bg_seed": 3,
    "model.head_seed": 2,
    "pretrain.fg_epochs": 8,
    "pretrain.bg_epochs": 4,
    "pretrain.lr": 0.05,
    "pretrain.momentum": 0.9,
    "pretrain.batch_size": 64,
    "pretrain.seed": 0,
    "train.lr": 0.05,
    "train.momentum": 0.9,
    "train.epochs": 30,
    "train.batch_size": 64,
    "train.seed": 0,
    "train.mode": "head_only",
    "reg.alphas": (0.1, 1.0, 10.0),
    "reg.warm_start": False,
    "retrain.epsilon": 0.3,
    "retrain.epochs": 6,
    "retrain.lr": 0.01,
    "retrain.mode": "full",
    "attack.epsilons": (0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5),
    "attack.sigmas": (0.0, 1.0, 2.0, 3.0, 5.0, 8.0, 12.0, 20.0),
    "attack.source": "foreground",
    "attack.shift_sigma": 5.0,
    "output.dir": "runs",
}

# sections each stage reads, upstream stages included
STAGE_SECTIONS = {
    "gen-data": ("dataset",),
    "pretrain": ("dataset", "model", "pretrain"),
    "train": ("dataset", "model", "pretrain", "train", "reg", "retrain"),
    "attack": ("dataset", "model", "pretrain", "train", "reg", "retrain", "attack"),
}
STAGE_SECTIONS["curve"] = STAGE_SECTIONS["attack"]
STAGE_SECTIONS["analyze"] = STAGE_SECTIONS["attack"]
STAGE_SECTIONS["report"] = STAGE_SECTIONS["attack"]
STAGE_SECTIONS["reproduce"] = STAGE_SECTIONS["attack"]


def _parse_value(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def _format_value(v):
    if isinstance(v, tuple):
        return ",".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def from_text(cls, text: str, source="<config>") -> "ExperimentConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
            key, _, value = line.partition("=")
            cfg.set(key.strip(), value, where=f"{source}:{lineno}: ")
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_text(p.read_text(), str(p))

    def set(self, key, value, where=""):
        if key not in DEFAULTS:
            raise ConfigError(f"{where}unknown config key {key!r}")
        default = DEFAULTS[key]
        self.values[key] = _parse_value(key, value, default) if isinstance(value, str) else value
        return self

    def replace(self, **updates) -> "ExperimentConfig":
        """Copy with dotted keys given as ``section__key=value``."""
        out = ExperimentConfig(dict(self.values))
        for k, v in updates.items():
            out.set(k.replace("__", "."), v)
        return out

    def __getitem__(self, key):
        return self.values[key]

    def to_text(self, sections=None) -> str:
        keys = sorted(k for k in self.values if sections is None or k.split(".")[0] in sections)
        return "".join(f"{k} = {_format_value(self.values[k])}\n" for k in keys)

    def hash(self, stage=None) -> str:
        """Short digest of the sections ``stage`` depends on (all sections if None)."""
        sections = STAGE_SECTIONS[stage] if stage else None
        return hashlib.sha256(self.to_text(sections).encode()).hexdigest()[:16]

    # -- typed views ----------------------------------------------------------

    @property
    def mode(self):
        return self["dataset.mode"]

    def meta(self):
        return make_meta(self["dataset.n_classes"], self.mode, self["dataset.n_super"], self["dataset.image_size"])

    def arch(self):
        return ArchConfig(widths=self["model.widths"], output_dim=self["model.output_dim"],
                          image_size=self["dataset.image_size"])

    def pretrain_config(self, epochs):
        return TrainConfig(lr=self["pretrain.lr"], momentum=self["pretrain.momentum"], epochs=epochs,
                           batch_size=self["pretrain.batch_size"], seed=self["pretrain.seed"], mode="full")

    def train_config(self):
        return TrainConfig(lr=self["train.lr"], momentum=self["train.momentum"], epochs=self["train.epochs"],
                           batch_size=self["train.batch_size"], seed=self["train.seed"], mode=self["train.mode"])

    def retrain_config(self):
        return TrainConfig(lr=self["retrain.lr"], momentum=self["train.momentum"], epochs=self["retrain.epochs"],
                           batch_size=self["train.batch_size"], seed=self["train.seed"], mode=self["retrain.mode"])

    def validate(self):
        if self.mode not in ("dissimilar", "similar", "uniform", "cifar10"):
            raise ConfigError(f"unknown dataset.mode {self.mode!r}")
        if self.mode != "cifar10":
            self.meta()
        self.arch().validate()
        self.train_config().validate()
        self.retrain_config().validate()
        for key in ("attack.epsilons", "attack.sigmas"):
            g = self[key]
            if not g or any(v < 0 for v in g) or any(b <= a for a, b in zip(g, g[1:])):
                raise ConfigError(f"{key} must be a non-empty, strictly increasing, non-negative grid")
        if any(a < 0 for a in self["reg.alphas"]):
            raise ConfigError("reg.alphas must be non-negative")
        if self["attack.source"] not in ("foreground", "background", "joint"):
            raise ConfigError(f"attack.source must name a base classifier, got {self['attack.source']!r}")
        if not 0 < self["dataset.train_fraction"] < 1:
            raise ConfigError("dataset.train_fraction must lie in (0, 1)")
        return self
