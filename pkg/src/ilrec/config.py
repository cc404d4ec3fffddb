"""Run configuration: nested sections, YAML loading, dotted overrides, effective-config dumps."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .env import SimulatorConfig, TerminationRule, WorldModelConfig
from .errors import ConfigError
from .expert import ExpertConfig
from .irl import IRLConfig
from .policy import TrainConfig
from .weighting import ValueFitConfig, WeightConfig

RULE_PRESETS = {"amazon": (15, 4), "steam": (50, 4)}


@dataclass
class EnvSection:
    n_items: int = 100
    n_categories: int = 10
    d_item: int = 8
    n_users: int = 200
    d_side: int = 4
    item_spread: float = 0.35
    pref_noise: float = 0.2
    protocol: str = "amazon"  # amazon | steam | custom; presets fix window and max_same
    window: int = 15
    max_same: int = 4
    length_cap: int = 100
    rollout_termination: bool = True  # apply the diversity rule inside world-model rollouts too
    temperature: float = 0.25
    noise_scale: float = 0.2
    drift: float = 0.02
    log_episodes: int = 3000
    max_transitions: int = 5000
    behavior: str = "epsilon_greedy"  # epsilon_greedy | uniform
    epsilon: float = 0.3
    tracker_k: int = 10
    tracker_decay: float = 0.9
    demo_users: int = 100

    def __post_init__(self):
        if self.protocol not in (*RULE_PRESETS, "custom"):
            raise ConfigError("env.protocol must be amazon, steam or custom")
        for name in ("n_items", "n_categories", "d_side", "length_cap", "tracker_k", "demo_users", "window",
                     "max_same"):
            if getattr(self, name) < 1:
                raise ConfigError(f"env.{name} must be >= 1")
        if self.n_items < self.n_categories:
            raise ConfigError("env.n_items must be >= env.n_categories")
        if self.d_item < 2:
            raise ConfigError("env.d_item must be >= 2")
        if self.n_users < 1:
            raise ConfigError("env.n_users must be >= 1")
        if self.max_same > self.window:
            raise ConfigError("env.max_same must be <= env.window")
        if self.behavior not in ("epsilon_greedy", "uniform"):
            raise ConfigError("env.behavior must be epsilon_greedy or uniform")
        if not 0 <= self.epsilon <= 1:
            raise ConfigError("env.epsilon must lie in [0, 1]")
        if not 0 < self.tracker_decay <= 1:
            raise ConfigError("env.tracker_decay must lie in (0, 1]")
        if self.log_episodes < 0 or self.max_transitions < 1:
            raise ConfigError("env.log_episodes must be >= 0 and env.max_transitions >= 1")
        for name in ("temperature", "noise_scale", "drift", "item_spread", "pref_noise"):
            if getattr(self, name) < 0 or (name == "temperature" and self.temperature == 0):
                raise ConfigError(f"env.{name} out of range")

    def rule(self):
        return TerminationRule(self.window, self.max_same, self.length_cap)

    def simulator(self):
        return SimulatorConfig(self.temperature, self.noise_scale, self.drift)


@dataclass
class EvalSection:
    n_episodes: int = 100
    seeds: tuple = (0, 1, 2, 3, 4)
    greedy: bool = True

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.n_episodes < 1:
            raise ConfigError("evalbench.n_episodes must be >= 1")
        if not self.seeds:
            raise ConfigError("evalbench.seeds must be non-empty")


SECTIONS = {
    "env": EnvSection,
    "world_model": WorldModelConfig,
    "expert": ExpertConfig,
    "irl": IRLConfig,
    "weighting": WeightConfig,
    "value": ValueFitConfig,
    "policy": TrainConfig,
    "evalbench": EvalSection,
}
DERIVED = {"seed"}  # section seeds always follow the global seed
TOP_LEVEL = {"seed": 0, "output_dir": "runs/default", "variant": "full"}


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    variant: str = "full"
    env: EnvSection = field(default_factory=EnvSection)
    world_model: WorldModelConfig = field(default_factory=WorldModelConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    irl: IRLConfig = field(default_factory=IRLConfig)
    weighting: WeightConfig = field(default_factory=WeightConfig)
    value: ValueFitConfig = field(default_factory=ValueFitConfig)
    policy: TrainConfig = field(default_factory=TrainConfig)
    evalbench: EvalSection = field(default_factory=EvalSection)

    def section(self, name, **extra):
        """Section object with the global seed stamped in where the section has one."""
        sec = copy.deepcopy(getattr(self, name))
        if any(f.name == "seed" for f in dataclasses.fields(sec)):
            sec.seed = self.seed
        for k, v in extra.items():
            setattr(sec, k, v)
        return sec


# -- coercion -----------------------------------------------------------------------

def _coerce(key, value, default):
    """Check ``value`` against the type of the default; returns the coerced value."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, tuple):
        if isinstance(value, (list, tuple)):
            inner = default[0] if default else None
            return tuple(_coerce(key, v, inner) if inner is not None else v for v in value)
    elif default is None:
        if value is None or isinstance(value, str):
            return value
    raise ConfigError(f"{key}: expected {type(default).__name__}, got {type(value).__name__} ({value!r})")


def _build_section(name, values):
    cls = SECTIONS[name]
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)} - DERIVED
    kwargs = {}
    for k, v in (values or {}).items():
        if k not in known:
            raise ConfigError(f"unknown configuration key {name}.{k}")
        kwargs[k] = _coerce(f"{name}.{k}", v, getattr(defaults, k))
    if name == "env":
        kwargs = _apply_rule_preset(kwargs)
    return cls(**kwargs)


def _apply_rule_preset(kw):
    protocol = kw.get("protocol", "amazon")
    if protocol in RULE_PRESETS:
        window, max_same = RULE_PRESETS[protocol]
        for key, val in (("window", window), ("max_same", max_same)):
            if key in kw and kw[key] != val:
                raise ConfigError(f"env.{key}={kw[key]} conflicts with env.protocol={protocol}; use protocol custom")
            kw[key] = val
    return kw


def from_dict(data):
    if data is not None and not isinstance(data, dict):
        raise ConfigError("configuration root must be a mapping")
    data = dict(data or {})
    top = {}
    for k in list(data):
        if k in TOP_LEVEL:
            top[k] = _coerce(k, data.pop(k), TOP_LEVEL[k])
    sections = {}
    explicit_alpha = "alpha" in (data.get("weighting") or {})
    explicit_mode = "weight_mode" in (data.get("policy") or {})
    for k, v in data.items():
        if k not in SECTIONS:
            raise ConfigError(f"unknown configuration key {k}")
        if v is not None and not isinstance(v, dict):
            raise ConfigError(f"{k}: expected a mapping")
        sections[k] = _build_section(k, v)
    cfg = RunConfig(**top, **sections)
    _resolve_variant(cfg, explicit_alpha, explicit_mode)
    return cfg


def _resolve_variant(cfg, explicit_alpha=True, explicit_mode=True):
    """Variants own alpha and the weighting switch: fill them in, or reject a contradiction."""
    from .evalbench import VARIANTS, check_variant

    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    if not explicit_alpha:
        if cfg.variant == "no_w_env":
            cfg.weighting.alpha = 0.0
        elif cfg.variant == "no_w_irl":
            cfg.weighting.alpha = 1.0
    if not explicit_mode and cfg.variant == "no_w":
        cfg.policy.weight_mode = "uniform"
    check_variant(cfg)


def parse_value(text):
    """Parse an override value with YAML scalar rules ("10" -> int, "1e-3" -> float, "[1, 2]" -> list)."""
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {text!r}: {exc}") from exc
    if isinstance(value, str):
        try:
            return float(value)  # YAML 1.1 reads "1e-3" as a string
        except ValueError:
            return value
    return value


def apply_overrides(data, overrides):
    data = copy.deepcopy(data or {})
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, text = item.split("=", 1)
        parts = path.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path} crosses a scalar")
        node[parts[-1]] = parse_value(text.strip())
    return data


def load_config(path=None, overrides=None):
    """Read a YAML file (or nothing), apply ``section.key=value`` overrides, validate."""
    data = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("configuration root must be a mapping")
    return from_dict(apply_overrides(data, overrides))


def to_dict(cfg):
    def plain(x):
        if isinstance(x, tuple):
            return [plain(v) for v in x]
        return x

    out = {k: plain(getattr(cfg, k)) for k in TOP_LEVEL}
    for name in SECTIONS:
        sec = getattr(cfg, name)
        out[name] = {f.name: plain(getattr(sec, f.name)) for f in dataclasses.fields(sec) if f.name not in DERIVED}
    return out


def set_path(cfg, path, value):
    """Set ``section.key`` on a config, re-validating the section."""
    parts = path.split(".")
    if len(parts) == 1:
        if parts[0] not in TOP_LEVEL:
            raise ConfigError(f"unknown configuration key {path}")
        setattr(cfg, parts[0], _coerce(path, value, TOP_LEVEL[parts[0]]))
        return cfg
    name, key = parts
    if name not in SECTIONS:
        raise ConfigError(f"unknown configuration key {path}")
    values = to_dict(cfg)[name]
    values[key] = value
    setattr(cfg, name, _build_section(name, values))
    return cfg


def config_hash(cfg):
    """Hash of everything that affects results (the output location does not)."""
    d = to_dict(cfg)
    d.pop("output_dir")
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def dump_config(cfg, path):
    path = Path(path)
    path.write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
    return path
