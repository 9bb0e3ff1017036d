"""Method presets and config-file loading.

A method preset is nothing more than an assignment of sensor sets to agents.
Every agent additionally receives the goal vector (the multi-hot of target
categories still to find); the "language" in the historical preset labels
refers to that channel, which is always present.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .trainer import ConfigError, TrainConfig


@dataclass(frozen=True)
class MethodPreset:
    name: str
    label: str
    agents: tuple  # one modality tuple per agent

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def agent_lists(self) -> list[list[str]]:
        return [list(m) for m in self.agents]


PRESETS: dict[str, MethodPreset] = {
    "single": MethodPreset("single", "Single-Agent", (("depth", "audio"),)),
    "vla": MethodPreset("vla", "VLA-Collab", (("depth",), ("depth",))),
    "ala": MethodPreset("ala", "ALA-Collab", (("audio",), ("audio",))),
    "avla": MethodPreset("avla", "AVLA-Collab", (("depth", "audio"), ("depth", "audio"))),
    "crona": MethodPreset("crona", "CRONA", (("audio",), ("depth",))),
}

# Desk-scale overrides: small sensors and networks plus faster learning rates
# so that studio-sized experiments finish on one CPU.
DESK_OVERRIDES = {
    "sensors": "desk",
    "actor_lr": 1e-3,
    "critic_lr": 1e-3,
    "eval_every": 50,
    "eval_episodes": 30,
}


def get_preset(name: str) -> MethodPreset:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"preset: unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def preset_config(name: str, desk: bool = False, **overrides) -> TrainConfig:
    """Default hyperparameters with the preset's agent layout, optionally at desk scale."""
    preset = get_preset(name)
    d = TrainConfig().to_dict()
    if desk:
        d.update(DESK_OVERRIDES)
    d["agents"] = preset.agent_lists()
    d.update(overrides)
    return TrainConfig.from_dict(d)


def config_from_dict(d: dict) -> TrainConfig:
    """Build a config from a mapping that may name a ``preset`` and a ``desk`` flag.

    Keys other than ``preset`` and ``desk`` must be TrainConfig fields; a
    ``preset`` supplies the agent layout unless ``agents`` is given.
    """
    d = dict(d)
    preset = d.pop("preset", None)
    desk = bool(d.pop("desk", False))
    if preset is not None:
        return preset_config(preset, desk=desk, **d)
    base = TrainConfig().to_dict()
    if desk:
        base.update(DESK_OVERRIDES)
    base.update(d)
    return TrainConfig.from_dict(base)


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config: file {str(path)!r} not found") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config: {path} is not valid JSON ({err})") from None
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be an object")
    return config_from_dict(data)


def dump_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
