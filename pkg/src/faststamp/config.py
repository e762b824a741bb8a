"""Run configuration: one JSON document for model, training, transforms and quantization.

Layout (every section optional, unknown keys rejected at every level)::

    {
      "seed": 0,
      "model": {ModelConfig fields},
      "train": {TrainConfig fields except model/benign/malicious/seed},
      "transforms": {"benign": [TransformSpec...], "malicious": [TransformSpec...]},
      "quant": {"qformat": "Q6.10", "rounding": "half_away", "overflow": "saturate"},
      "paths": {"dataset": ..., "val_dataset": ..., "out_dir": ...}
    }

Precedence: built-in defaults < config file < command-line flags.
"""
import json
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .model import ModelConfig, TOY_CONFIG
from .quant import FixedSpec
from .train import TrainConfig
from .transforms import TransformSpec

SECTIONS = ("seed", "model", "train", "transforms", "quant", "paths")
_TRAIN_OWN = {f.name for f in fields(TrainConfig)} - {"model", "benign", "malicious", "seed",
                                                       "dataset", "val_dataset", "out_dir"}
_PATHS = ("dataset", "val_dataset", "out_dir")
_QUANT = ("qformat", "rounding", "overflow", "lut_size", "lut_range")


def _reject_unknown(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


@dataclass
class RunConfig:
    seed: int = 0
    model: dict = field(default_factory=TOY_CONFIG.to_dict)
    train: dict = field(default_factory=dict)
    transforms: dict = field(default_factory=dict)
    quant: dict = field(default_factory=lambda: {"qformat": "Q6.10"})
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")
        ModelConfig.from_dict(self.model).validate()
        _reject_unknown(self.train, _TRAIN_OWN, "train")
        _reject_unknown(self.transforms, ("benign", "malicious"), "transforms")
        for key, specs in self.transforms.items():
            if not isinstance(specs, list) or not specs:
                raise ConfigError(f"transforms.{key} must be a non-empty list")
            for d in specs:
                TransformSpec.from_dict(d)
        _reject_unknown(self.quant, _QUANT, "quant")
        self.fixed_spec()
        _reject_unknown(self.paths, _PATHS, "paths")
        self.train_config()
        return self

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(d, SECTIONS, "config")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                d = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(d)

    def to_dict(self):
        return {"seed": self.seed, "model": dict(self.model), "train": dict(self.train),
                "transforms": dict(self.transforms), "quant": dict(self.quant), "paths": dict(self.paths)}

    def dump(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def model_config(self):
        return ModelConfig.from_dict(self.model)

    def fixed_spec(self):
        q = dict(self.quant)
        name = q.pop("qformat", "Q6.10")
        return FixedSpec.parse(name, **q)

    def train_config(self):
        kw = dict(self.train)
        kw.update({k: v for k, v in self.paths.items() if v is not None})
        kw["seed"] = self.seed
        kw["model"] = dict(self.model)
        if "benign" in self.transforms:
            kw["benign"] = self.transforms["benign"]
        if "malicious" in self.transforms:
            kw["malicious"] = self.transforms["malicious"]
        return TrainConfig.from_dict(kw)

    def override(self, seed=None, train=None, paths=None, quant=None):
        """New config with flag values layered on top (``None`` values are ignored)."""
        d = self.to_dict()
        if seed is not None:
            d["seed"] = seed
        for section, extra in (("train", train), ("paths", paths), ("quant", quant)):
            for k, v in (extra or {}).items():
                if v is not None:
                    d[section][k] = v
        return RunConfig.from_dict(d)
