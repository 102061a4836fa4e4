"""Flat ``section.key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig
from .pretrain import PretrainConfig
from .sampling import DecodeConfig
from .taskgen import ObjectSplit, make_task_set, split_objects
from .trainer import GrpoConfig
from .vocab import DEFAULT_COLORS, DEFAULT_OBJECTS, Vocabulary, build_vocabulary

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    grid_side: int = 4
    objects: tuple = DEFAULT_OBJECTS
    colors: tuple = DEFAULT_COLORS
    test_fraction: float = 0.25
    split_seed: int = 0
    tasks_per_category: int = 500
    test_per_category: int = 50
    train_seed: int = 1
    test_seed: int = 2


@dataclass(frozen=True)
class SftConfig:
    steps: int = 5000
    batch_size: int = 2
    learning_rate: float = 1e-5


@dataclass
class RunConfig:
    seed: int = 0
    tasks: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    sft: SftConfig = field(default_factory=SftConfig)

    def __post_init__(self):
        self.pretrain = dataclasses.replace(self.pretrain, seed=self.seed)

    # --- derived objects ----------------------------------------------
    def vocabulary(self) -> Vocabulary:
        return build_vocabulary(self.tasks.objects, self.tasks.colors, self.tasks.grid_side)

    def object_split(self, v: Vocabulary) -> ObjectSplit:
        return split_objects(v, self.tasks.test_fraction, np.random.default_rng(self.tasks.split_seed))

    def task_sets(self, v: Vocabulary) -> tuple[list, list]:
        objs = self.object_split(v)
        train = make_task_set(v, objs, "train", self.tasks.tasks_per_category, self.tasks.train_seed)
        test = make_task_set(v, objs, "test", self.tasks.test_per_category, self.tasks.test_seed)
        return train, test

    def posttrain_config(self, method: str, mode: str) -> GrpoConfig:
        """GRPO settings, with steps, batch size and lr from ``sft`` for SFT runs."""
        cfg = dataclasses.replace(self.grpo, mode=mode, decode=self.decode)
        if method == "sft":
            cfg = dataclasses.replace(
                cfg, steps=self.sft.steps, batch_size=self.sft.batch_size, learning_rate=self.sft.learning_rate
            )
        return cfg

    def to_flat(self) -> dict:
        return flatten(self)

    def dumps(self) -> str:
        lines = [f"config_version = {CONFIG_VERSION}"]
        for key, value in self.to_flat().items():
            lines.append(f"{key} = {format_value(value)}")
        return "\n".join(lines) + "\n"


SECTIONS = ("tasks", "model", "decode", "pretrain", "grpo", "sft")
# taken from the decode section, the command line and the run seed
_SKIP = {("grpo", "decode"), ("grpo", "mode"), ("pretrain", "seed")}


def flatten(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed}
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            if (section, f.name) in _SKIP:
                continue
            value = getattr(obj, f.name)
            if isinstance(value, dict):
                for k in sorted(value):
                    out[f"{section}.{f.name}.{k}"] = value[k]
            else:
                out[f"{section}.{f.name}"] = value
    return out


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(x) for x in value)
    return str(value)


def _coerce(raw: str, default, key: str, lineno: int):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = tuple(x.strip() for x in raw.split(",") if x.strip())
            if not items:
                raise ValueError(raw)
            return items
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {raw!r} for key {key!r}") from None


def loads(text: str) -> RunConfig:
    """Parse a config; unknown keys and malformed lines name the key and line."""
    defaults = RunConfig().to_flat()
    values, version = {}, None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "config_version":
            version = _coerce(raw, 0, key, lineno)
            continue
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(raw, defaults[key], key, lineno)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config_version must be {CONFIG_VERSION}, got {version}")
    return from_flat({**defaults, **values})


def from_flat(flat: dict) -> RunConfig:
    kwargs = {}
    for section in SECTIONS:
        fields = {}
        for key, value in flat.items():
            parts = key.split(".")
            if parts[0] != section:
                continue
            if len(parts) == 3:
                fields.setdefault(parts[1], {})[parts[2]] = value
            else:
                fields[parts[1]] = value
        kwargs[section] = fields
    base = RunConfig()
    try:
        return RunConfig(
            seed=flat["seed"],
            tasks=TaskConfig(**kwargs["tasks"]),
            model=ModelConfig(**kwargs["model"]),
            decode=DecodeConfig(**kwargs["decode"]),
            pretrain=PretrainConfig(**kwargs["pretrain"], seed=flat["seed"]),
            grpo=GrpoConfig(**kwargs["grpo"], mode=base.grpo.mode, decode=DecodeConfig(**kwargs["decode"])),
            sft=SftConfig(**kwargs["sft"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def reference_page() -> str:
    """Markdown table of every key and its default."""
    lines = [
        "# Configuration reference",
        "",
        "Files hold one `key = value` per line; `#` starts a comment. "
        f"`config_version = {CONFIG_VERSION}` is required and unknown keys are rejected.",
        "",
        "| key | default |",
        "| --- | --- |",
    ]
    for key, value in RunConfig().to_flat().items():
        lines.append(f"| `{key}` | `{format_value(value)}` |")
    return "\n".join(lines) + "\n"

