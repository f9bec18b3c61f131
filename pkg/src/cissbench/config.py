"""Experiment configuration: presets, overrides and canonical hashing."""

import copy
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import __version__
from .segnet import config_hash
from .taskstream import REGIMES, SyntheticSceneConfig
from .trainer import LOSS_KINDS, METHODS, TrainConfig

EXPERIMENT_METHODS = METHODS + ("offline",)
PROBES = ("confusion", "stitch", "cka", "bias", "retrain", "predictions")


class ConfigError(ValueError):
    """Invalid configuration; ``valid`` lists the accepted values when known."""

    def __init__(self, msg, valid=None):
        super().__init__(msg)
        self.valid = list(valid) if valid is not None else None


# Desk-scale method strengths (calibrated on voc15-5-mini).
DESK_METHOD_PARAMS = {
    "finetune": {},
    "ewc": {"lam": 5e6, "grad_clip_norm": 10.0},
    "mas": {"lam": 6.0},
    "lwf": {"lam": 6.0, "temperature": 2.0},
    "replay": {"replay_capacity": 20},
    "offline": {},
}

FULL_SCALE_METHOD_PARAMS = {
    "finetune": {},
    "ewc": {"lam": 10000.0, "grad_clip_norm": 10.0},
    "mas": {"lam": 5000.0},
    "lwf": {"lam": 6.0, "temperature": 2.0},
    "replay": {"replay_capacity": 20},
    "offline": {},
}

FULL_SCALE_PROTOCOL = {"lr_first": 0.07, "lr_later": 5e-4, "epochs": 100, "batch_size": 16}

PRESETS = {
    "voc15-5-mini": {
        "name": "voc15-5-mini",
        "seed": 0,
        "dataset": {
            "num_classes": 7,
            "image_size": [64, 64],
            "shapes_per_image": [1, 3],
            "num_train": 400,
            "num_val": 80,
            "num_test": 120,
        },
        "tasks": {"splits": [[1, 2, 3, 4], [5, 6]], "regime": "disjoint"},
        "train": {
            "method": "finetune",
            "loss_kind": "ce",
            "head_kind": "standard",
            "lr_first": 0.05,
            "lr_later": 0.002,
            "epochs": 30,
            "batch_size": 8,
            "lam": None,
        },
        "diagnostics": {
            "probes": list(PROBES),
            "retrain_epochs": 30,
            "retrain_lr": None,
            "cka_positions": 512,
            "prediction_samples": 4,
        },
        "output_dir": "cissbench_out",
    }
}


def _deep_update(base, upd):
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def parse_override(text):
    """``"train.lam=5"`` -> (``["train", "lam"]``, 5).  Values are parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(raw, overrides):
    raw = copy.deepcopy(raw)
    for text in overrides or []:
        path, value = parse_override(text)
        node = raw
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {'.'.join(path)}: {p} is not a section")
        node[path[-1]] = value
    return raw


@dataclass
class ExperimentConfig:
    dataset: dict
    tasks: dict
    train: dict
    diagnostics: dict = field(default_factory=dict)
    output_dir: str = "cissbench_out"
    seed: int = 0
    name: str = "experiment"
    paper_protocol: bool = False

    @classmethod
    def from_dict(cls, raw):
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}", sorted(names))
        for req in ("dataset", "tasks", "train"):
            if req not in raw:
                raise ConfigError(f"missing config section {req!r}")
        cfg = cls(**copy.deepcopy(raw))
        cfg.validate()
        return cfg

    @classmethod
    def preset(cls, name="voc15-5-mini", overrides=None, seed=None, paper_protocol=False):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}", sorted(PRESETS))
        raw = apply_overrides(PRESETS[name], overrides)
        if seed is not None:
            raw["seed"] = seed
        if paper_protocol:
            raw["paper_protocol"] = True
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path, overrides=None, seed=None, paper_protocol=False):
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        base = copy.deepcopy(PRESETS[raw.pop("preset")]) if "preset" in raw else {}
        raw = apply_overrides(_deep_update(base, raw), overrides)
        if seed is not None:
            raw["seed"] = seed
        if paper_protocol:
            raw["paper_protocol"] = True
        return cls.from_dict(raw)

    def to_dict(self):
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}

    # -- validation and resolution -------------------------------------------------

    @property
    def method(self):
        return self.train.get("method", "finetune")

    @property
    def regime(self):
        return self.tasks.get("regime", "disjoint")

    def validate(self):
        if self.method not in EXPERIMENT_METHODS:
            raise ConfigError(f"unknown method {self.method!r}", EXPERIMENT_METHODS)
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}", REGIMES)
        lk = self.train.get("loss_kind", "ce")
        if lk not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {lk!r}", LOSS_KINDS)
        probes = self.diagnostics.get("probes", [])
        bad = [p for p in probes if p not in PROBES]
        if bad:
            raise ConfigError(f"unknown probes {bad}", PROBES)
        splits = self.tasks.get("splits")
        if not splits or not all(isinstance(s, list) and s for s in splits):
            raise ConfigError("tasks.splits must be a list of non-empty class lists")
        try:
            self.scene_config()
            self.train_config()
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    def scene_config(self):
        """SyntheticSceneConfig for this experiment, or ``None`` for a dataset path."""
        if "path" in self.dataset:
            return None
        d = dict(self.dataset)
        d.setdefault("seed", self.seed)
        known = {f.name for f in fields(SyntheticSceneConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}", sorted(known))
        return SyntheticSceneConfig(**d)

    def train_config(self):
        """Resolve method defaults (desk or full-scale protocol) into a TrainConfig."""
        d = {k: v for k, v in self.train.items() if v is not None}
        method = d.pop("method", "finetune")
        table = FULL_SCALE_METHOD_PARAMS if self.paper_protocol else DESK_METHOD_PARAMS
        resolved = dict(FULL_SCALE_PROTOCOL) if self.paper_protocol else {}
        resolved.update(table[method])
        for k, v in d.items():
            if self.paper_protocol and k in FULL_SCALE_PROTOCOL:
                continue
            if k in table[method] and self.train.get(k) is None:
                continue
            resolved[k] = v
        resolved.setdefault("seed", self.seed)
        resolved["method"] = "finetune" if method == "offline" else method
        try:
            return TrainConfig.from_dict(resolved)
        except ValueError as e:
            valid = None
            if "method" in str(e):
                valid = EXPERIMENT_METHODS
            raise ConfigError(str(e), valid) from e

    def identity(self):
        """The canonical content that identifies a training run."""
        return {
            "version": __version__,
            "dataset": self.scene_config().to_dict() if self.scene_config() else self.dataset,
            "tasks": {"splits": [sorted(s) for s in self.tasks["splits"]], "regime": self.regime},
            "method": self.method,
            "train": self.train_config().to_dict(),
        }

    def hash(self):
        return config_hash(self.identity())

    def run_id(self):
        t = self.train_config()
        head = "-wn" if t.head_kind == "weight_normalized" else ""
        return f"{self.method}-{t.loss_kind}{head}-{self.regime}-s{self.seed}-{self.hash()[:10]}"
