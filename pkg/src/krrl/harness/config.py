"""Experiment configuration: nested dataclasses, desk/paper profiles, JSON files."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class LearnerConfig:
    r_max: float = 100.0
    m_known: int = 10
    replan_every: int = 20
    epsilon: float = 1e-3
    gamma: float = 0.95


@dataclass
class DialogConfig:
    ask_cost: float = 2.0
    confirm_cost: float = 1.5
    bonus: float = 80.0
    penalty: float = 80.0
    turn_cap: int = 20
    depth: int = 3
    p_correct: float = 0.8
    confirm_flip: float = 0.1


@dataclass
class LearnConfig:
    map: str = "fig4"
    br: float = 0.3
    tasks: int = 5  # task budget
    episodes_per_task: int = 300
    step_cap: int = 200


@dataclass
class TransferConfig:
    maps: tuple = ("fig4", "fig4_50")
    step_caps: tuple = (200, 300)
    target_episodes: tuple = (300, 500)
    source: str = "room1"
    target: str = "room2"
    br: float = 0.1
    source_episodes: int = 100
    seeds: int = 100
    m_known: int = 5
    epsilon: float = 0.05
    window: int = 10
    level: float = 0.9


@dataclass
class DeliveryConfig:
    map: str = "fig4"
    brs: tuple = (0.1, 0.5, 0.7)
    static_br: float = 0.3
    trials: int = 1000
    kb: str = "delivery"


@dataclass
class EntropyConfig:
    map: str = "fig4"
    brs: tuple = (0.1, 0.5, 0.7)
    rooms: tuple = ("room1", "room2", "room5")
    beliefs: int = 10_000
    sampler: str = "peaked"  # peaked | dirichlet
    eps_max: float = 0.3
    alpha: float = 1.0


@dataclass
class MergeConfig:
    map: str = "fig4"
    goal: str = "room3"
    trials: int = 1000
    via_kb: bool = True


@dataclass
class CdfConfig:
    map: str = "fig4"
    brs: tuple = (0.1, 0.5)
    rooms: tuple = ("room2", "room4")
    prune: float = 1e-5
    grid_step: float = 0.5


@dataclass
class ExperimentConfig:
    seed: int = 0
    profile: str = "desk"
    out: str = "results"
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    dialog: DialogConfig = field(default_factory=DialogConfig)
    learn: LearnConfig = field(default_factory=LearnConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    delivery: DeliveryConfig = field(default_factory=DeliveryConfig)
    entropy: EntropyConfig = field(default_factory=EntropyConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    cdf: CdfConfig = field(default_factory=CdfConfig)

    def validate(self) -> "ExperimentConfig":
        if self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        counts = {
            "transfer.seeds": self.transfer.seeds, "transfer.source_episodes": self.transfer.source_episodes,
            "delivery.trials": self.delivery.trials, "entropy.beliefs": self.entropy.beliefs,
            "merge.trials": self.merge.trials, "learn.episodes_per_task": self.learn.episodes_per_task,
        }
        for name, v in counts.items():
            if int(v) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.learn.tasks < 0:
            raise ConfigError("learn.tasks must be nonnegative")
        if not (len(self.transfer.maps) == len(self.transfer.step_caps) == len(self.transfer.target_episodes)):
            raise ConfigError("transfer.maps, step_caps and target_episodes must have equal length")
        if self.entropy.sampler not in ("peaked", "dirichlet"):
            raise ConfigError("entropy.sampler must be 'peaked' or 'dirichlet'")
        for br in (*self.delivery.brs, *self.entropy.brs, *self.cdf.brs, self.delivery.static_br,
                   self.transfer.br, self.learn.br):
            if not 0.0 <= br <= 1.0:
                raise ConfigError(f"blocking rate {br} outside [0, 1]")
        return self


# trial counts per profile; everything else is shared
PROFILES = {
    "desk": {"transfer": {"seeds": 100}, "delivery": {"trials": 1000}},
    "paper": {"transfer": {"seeds": 1000}, "delivery": {"trials": 10_000}},
}


def _apply(obj, updates: dict, where: str):
    for key, value in updates.items():
        if not hasattr(obj, key) or key.startswith("_"):
            raise ConfigError(f"unknown config key {where}{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be a section")
            _apply(current, value, f"{where}{key}.")
            continue
        if isinstance(current, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}{key} must be a list")
            value = tuple(value)
        elif isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}{key} must be true or false")
        elif isinstance(current, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}{key} must be a number")
            if isinstance(current, int) and not float(value).is_integer():
                raise ConfigError(f"{where}{key} must be an integer")
            value = type(current)(value)
        elif isinstance(current, str) and not isinstance(value, str):
            raise ConfigError(f"{where}{key} must be a string")
        setattr(obj, key, value)


def make_config(profile: str = "desk", overrides: dict | None = None) -> ExperimentConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = ExperimentConfig(profile=profile)
    _apply(cfg, PROFILES[profile], "")
    if overrides:
        _apply(cfg, overrides, "")
    return cfg.validate()


def load_config(path, profile: str | None = None) -> ExperimentConfig:
    """JSON config; a top-level "profile" applies first, then the other keys."""
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    prof = profile or data.pop("profile", "desk")
    data.pop("profile", None)
    return make_config(prof, data)


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
