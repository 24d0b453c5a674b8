"""Versioned checkpoints: config fingerprint, module/optimizer states, RNG states."""

from __future__ import annotations

import random

import torch

from .config import ExperimentConfig
from .errors import ConfigError

FORMAT = "sgn-checkpoint"
VERSION = 1


def save_checkpoint(path, config: ExperimentConfig, modules: dict, counters: dict,
                    optimizer=None) -> None:
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "fingerprint": config.fingerprint(),
        "config": config.to_kv(),
        "state": {name: module.state_dict() for name, module in modules.items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "counters": dict(counters),
        "rng": {"torch": torch.get_rng_state(), "python": random.getstate()},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != FORMAT:
        raise ConfigError(f"{path}: not a checkpoint file")
    if payload.get("version") != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def restore_modules(payload: dict, modules: dict) -> None:
    for name, module in modules.items():
        module.load_state_dict(payload["state"][name])


def restore_rng(payload: dict) -> None:
    torch.set_rng_state(payload["rng"]["torch"])
    random.setstate(payload["rng"]["python"])


def config_from_checkpoint(payload: dict) -> ExperimentConfig:
    return ExperimentConfig.from_kv(payload["config"])
