"""Run configuration: JSON files merged with dotted ``key=value`` overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .networks import ModelConfig
from .trainer import TrainConfig

SNAPSHOT_NAME = "run_config.json"

# flat shortcuts accepted at the top level of a config file
ALIASES = {
    "lr": "train.lr",
    "batch_size": "train.batch_size",
    "max_epochs": "train.max_epochs",
    "patience": "train.patience",
    "seed": "train.seed",
    "deterministic": "train.deterministic",
    "augment": "train.augment",
    "grad_clip": "train.grad_clip",
    "psnr_sign": "train.weights.psnr_sign",
    "psnr_squared": "train.weights.psnr_squared",
    "w1": "train.weights.w1",
    "w2": "train.weights.w2",
    "w3": "train.weights.w3",
    "w4": "train.weights.w4",
    "shared_stem": "model.shared_stem",
}

EVAL_DEFAULTS = {"masked": True, "normalization": "mean", "psnr_squared": False}


def _set_dotted(tree: dict, key: str, value) -> None:
    key = ALIASES.get(key, key)
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise KeyError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise KeyError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _merge(tree: dict, update: dict, top: bool = True) -> None:
    for k, v in update.items():
        if top and ("." in k or k in ALIASES):
            _set_dotted(tree, k, v)
        elif k not in tree:
            raise KeyError(f"unknown config key {k!r}")
        elif isinstance(tree[k], dict):
            if not isinstance(v, dict):
                raise KeyError(f"config section {k!r} must be an object")
            _merge(tree[k], v, top=False)
        else:
            tree[k] = v


def parse_override(text: str) -> tuple[str, object]:
    """``"train.lr=1e-3"`` -> ``("train.lr", 0.001)``; values are JSON, else strings."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: dict = field(default_factory=lambda: dict(EVAL_DEFAULTS))

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "eval": dict(self.eval)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        train = dict(d.get("train", {}))
        train["weights"] = LossWeights(**train.get("weights", {}))
        return cls(ModelConfig.from_dict(d.get("model", {})), TrainConfig(**train),
                   {**EVAL_DEFAULTS, **d.get("eval", {})})

    @classmethod
    def resolve(cls, path=None, overrides=(), dims=None) -> "RunConfig":
        """Defaults, then the JSON file at ``path``, then ``overrides`` in order."""
        tree = copy.deepcopy(cls().to_dict())
        if dims is not None:
            tree["model"]["synthesis"]["input_dims"] = list(dims)
            tree["model"]["diagnosis"]["input_dims"] = list(dims)
        if path is not None:
            doc = json.loads(Path(path).read_text())
            if not isinstance(doc, dict):
                raise ValueError("config file must hold a JSON object")
            _merge(tree, doc)
        for item in overrides:
            key, value = parse_override(item) if isinstance(item, str) else item
            _set_dotted(tree, key, value)
        return cls.from_dict(tree)

    def snapshot(self, out_dir, extra: dict | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        doc = self.to_dict()
        if extra:
            doc["command"] = extra
        path = out / SNAPSHOT_NAME
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        return path
