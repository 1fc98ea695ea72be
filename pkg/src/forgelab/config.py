"""Run configuration: one INI document with typed sections and strict key checking.

Sections and their keys mirror the dataclasses they build::

    [run]       seed, count, forget_color, rollout_steps
    [world]     WorldConfig fields
    [policy]    model width and depth
    [train]     TrainConfig fields (without seed)
    [unlearn]   StageConfig fields (without seed)
    [baseline]  BaselineConfig fields (without method and seed)

Tuple-valued fields are written as comma-separated lists.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .baselines import BaselineConfig
from .policy import PolicyConfig
from .training import TrainConfig
from .unlearn import StageConfig
from .world import ConfigError, UnlearnRequest, WorldConfig


@dataclass(frozen=True)
class RunSection:
    seed: int = 42
    count: int = 512
    forget_color: str = "red"
    rollout_steps: int = 24


@dataclass(frozen=True)
class ModelSection:
    d_model: int = 64
    n_heads: int = 4
    vision_blocks: int = 2
    lm_blocks: int = 4
    mlp_ratio: int = 4


SECTIONS = {
    "run": RunSection,
    "world": WorldConfig,
    "policy": ModelSection,
    "train": TrainConfig,
    "unlearn": StageConfig,
    "baseline": BaselineConfig,
}
# keys owned by [run] or by the command line rather than by the section itself
RESERVED = {"train": {"seed"}, "unlearn": {"seed"}, "baseline": {"seed", "method"}}


def _fields(cls, section: str) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in fields(cls) if f.name not in RESERVED.get(section, ())}


def _parse_value(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            v = raw.strip().lower()
            if v not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return v in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        if default is None:
            v = raw.strip()
            return None if v.lower() in ("", "none") else float(v)
        return type(default)(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc


def _default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    world: WorldConfig = field(default_factory=WorldConfig)
    policy: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    unlearn: StageConfig = field(default_factory=StageConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    # --- derived configs, all sharing the run seed
    @property
    def seed(self) -> int:
        return self.run.seed

    def policy_config(self) -> PolicyConfig:
        w = self.world
        return PolicyConfig(grid_n=w.grid_n, colors=w.colors, shapes=w.shapes, max_action_len=w.max_action_len,
                            **dataclasses.asdict(self.policy))

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def stage_config(self) -> StageConfig:
        return dataclasses.replace(self.unlearn, seed=self.seed)

    def baseline_config(self, method: str) -> BaselineConfig:
        return dataclasses.replace(self.baseline, method=method, seed=self.seed)

    def request(self) -> UnlearnRequest:
        return UnlearnRequest("target_color", self.run.forget_color)

    def with_seed(self, seed: int) -> RunConfig:
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seed=seed))

    # --- serialization
    def to_json(self) -> dict:
        out = {}
        for name, cls in SECTIONS.items():
            obj = getattr(self, name)
            out[name] = {k: (list(v) if isinstance(v, tuple) else v)
                         for k in _fields(cls, name) for v in [getattr(obj, k)]}
        return out

    def section_hash(self, *names: str) -> str:
        doc = {n: self.to_json()[n] for n in names}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def config_hash(self) -> str:
        return self.section_hash(*SECTIONS)

    def data_hash(self) -> str:
        return self.section_hash("run", "world")

    def to_ini(self) -> str:
        lines = []
        for name, sec in self.to_json().items():
            lines.append(f"[{name}]")
            for k, v in sec.items():
                if isinstance(v, list):
                    v = ",".join(v)
                lines.append(f"{k} = {'none' if v is None else v}")
            lines.append("")
        return "\n".join(lines)

    def validate(self) -> None:
        r = self.run
        if r.count < 1:
            raise ConfigError("run.count must be at least 1")
        if r.rollout_steps < 1:
            raise ConfigError("run.rollout_steps must be at least 1")
        if r.forget_color not in self.world.colors:
            raise ConfigError(f"run.forget_color {r.forget_color!r} is not one of {self.world.colors}")
        try:
            self.world.validate()
            self.policy_config()
            self.train_config().validate()
            self.stage_config().validate()
            self.baseline_config("ga").validate()
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{source}: unknown sections {sorted(unknown)}")
    parts = {}
    for name, cls in SECTIONS.items():
        known = _fields(cls, name)
        kw = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in known:
                    raise ConfigError(f"{source}: unknown key {name}.{key}")
                kw[key] = _parse_value(raw, _default(known[key]), f"{source}: {name}.{key}")
        try:
            parts[name] = cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: [{name}] {exc}") from exc
    cfg = RunConfig(**parts)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
