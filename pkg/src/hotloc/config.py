"""Run configuration: one JSON document with ``seed``, ``model`` and ``train`` sections.

Unknown keys anywhere are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .hotformer import ConfigError, ModelConfig, toy_config
from .training import TrainConfig

TOP_LEVEL_KEYS = {"seed", "model", "train"}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=toy_config)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("seed")
        return {"seed": self.seed, "model": self.model.to_dict(), "train": train}

    def with_overrides(self, seed=None, coord=None, relay_tokens=None, pooling=None) -> "RunConfig":
        model = self.model
        changes = {}
        if coord is not None:
            changes["coord_mode"] = coord
        if relay_tokens is not None:
            changes["relay_tokens"] = relay_tokens
        if pooling is not None:
            changes["pooling"] = pooling
        if changes:
            model = dataclasses.replace(model, **changes)
        seed = self.seed if seed is None else int(seed)
        return RunConfig(seed, model, dataclasses.replace(self.train, seed=seed))


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    model_doc = dict(doc.get("model", {}))
    model = ModelConfig.from_dict({**toy_config().to_dict(), **model_doc})
    train_doc = dict(doc.get("train", {}))
    if "seed" in train_doc:
        raise ConfigError("train.seed is not allowed; set the top-level seed")
    try:
        train = TrainConfig.from_dict({**train_doc, "seed": seed})
    except TypeError as exc:
        raise ConfigError(f"bad train section: {exc}") from exc
    return RunConfig(seed, model, train)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(doc)
