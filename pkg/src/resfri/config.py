"""Versioned JSON run configuration: ``{"version", "network", "train"}``.

Precedence when running: built-in defaults < config file < command-line flags.
"""

import json

from .errors import ConfigError
from .network import CONFIG_VERSION, PRESETS, NetworkConfig
from .trainer import TrainConfig


def make_config(preset="desk", fusion="addition", split=False, **train_overrides):
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return PRESETS[preset](fusion=fusion, split=split), TrainConfig(**train_overrides)


def to_document(net_cfg, train_cfg):
    return {"version": CONFIG_VERSION, "network": net_cfg.to_dict(), "train": train_cfg.to_dict()}


def from_document(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    version = doc.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}; expected {CONFIG_VERSION}")
    unknown = set(doc) - {"version", "network", "train"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    if "network" not in doc:
        raise ConfigError("config is missing the 'network' section")
    try:
        net = NetworkConfig.from_dict(doc["network"])
        train = TrainConfig.from_dict(doc.get("train", {}))
    except TypeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return net, train


def load_config(path):
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return from_document(doc)


def save_config(path, net_cfg, train_cfg):
    with open(path, "w") as f:
        json.dump(to_document(net_cfg, train_cfg), f, indent=2)
        f.write("\n")
