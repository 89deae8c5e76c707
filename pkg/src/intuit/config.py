"""Run configuration: one INI file, dotted overrides, and a stable hash."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .reasoner import ModelConfig, SamplerConfig
from .rewards import RewardConfig
from .stages import Hyperparams
from .worldgen import DEFAULT_SIZES, SPLITS, ConfigError, WorldConfig

REPORT_DIR_ENV = "INTUIT_REPORT_DIR"

# Desk-scale settings that differ from the Hyperparams dataclass defaults.
DESK_HYPER = dict(
    lr_cold_start=2e-3,
    lr_grpo=1e-4,
    lr_calibration=1e-3,
    cold_start_epochs=15,
    grpo_rounds=50,
)

# reasoning tokens allowed by default; the sampler cap adds the 4 answer-wrapper tokens
DEFAULT_BUDGET = 48


@dataclass(frozen=True)
class ArchConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 1
    d_mlp: int = 256
    context_length: int = 160

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, **dataclasses.asdict(self))


@dataclass(frozen=True)
class Paths:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"
    # stage inputs; empty means the default file inside checkpoint_dir
    stage1_checkpoint: str = ""
    stage2_checkpoint: str = ""
    calibrator_checkpoint: str = ""

    def report(self) -> Path:
        return Path(os.environ.get(REPORT_DIR_ENV) or self.report_dir)

    def data(self, name: str) -> Path:
        return Path(self.data_dir) / name

    def checkpoint(self, stage: str) -> Path:
        given = getattr(self, f"{stage}_checkpoint")
        return Path(given) if given else Path(self.checkpoint_dir) / f"{stage}.ckpt"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1
    world: WorldConfig = field(default_factory=WorldConfig)
    sizes: dict = field(default_factory=lambda: dict(DEFAULT_SIZES))
    arch: ArchConfig = field(default_factory=ArchConfig)
    hyper: Hyperparams = field(default_factory=lambda: Hyperparams(**DESK_HYPER))
    rewards: RewardConfig = field(default_factory=RewardConfig)
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(max_trace_tokens=DEFAULT_BUDGET + 4))
    paths: Paths = field(default_factory=Paths)
    # calibrator initialisation: "stage2" (default) or "scratch"
    calibrator_init: str = "stage2"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        self.world.validate()
        if set(self.sizes) != set(SPLITS) or min(self.sizes.values()) < 1:
            raise ConfigError(f"sizes must give a positive count for each of {SPLITS}")
        if self.calibrator_init not in ("stage2", "scratch"):
            raise ConfigError("calibrator_init must be 'stage2' or 'scratch'")
        needed = self.world.sequence_length + 1 + self.sampler.max_trace_tokens
        if needed > self.arch.context_length:
            raise ConfigError(f"context_length {self.arch.context_length} cannot hold prompt + budget ({needed})")

    # -- derived views -------------------------------------------------------

    @property
    def world_seeded(self) -> WorldConfig:
        return dataclasses.replace(self.world, seed=self.seed)

    @property
    def hp(self) -> Hyperparams:
        """Stage hyperparameters with the run seed and sampler settings folded in."""
        return dataclasses.replace(
            self.hyper,
            seed=self.seed,
            max_trace_tokens=self.sampler.max_trace_tokens,
            rollout_temperature=self.sampler.temperature,
        )

    @property
    def model_config(self) -> ModelConfig:
        return self.arch.model_config(self.world.vocab.size)

    def with_budget(self, reasoning_tokens: int) -> "RunConfig":
        """Budget counts reasoning tokens; the four answer-wrapper tokens come on top."""
        return dataclasses.replace(self, sampler=dataclasses.replace(self.sampler, max_trace_tokens=reasoning_tokens + 4))

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        out = {
            "run": {"seed": self.seed, "calibrator_init": self.calibrator_init},
            "world": {k: v for k, v in dataclasses.asdict(self.world).items() if k != "seed"},
            "sizes": dict(self.sizes),
            "model": dataclasses.asdict(self.arch),
            "hyper": {
                k: v
                for k, v in dataclasses.asdict(self.hyper).items()
                if k not in ("seed", "max_trace_tokens", "rollout_temperature")
            },
            "rewards": dataclasses.asdict(self.rewards),
            "sampler": {"temperature": self.sampler.temperature, "max_trace_tokens": self.sampler.max_trace_tokens},
            "paths": dataclasses.asdict(self.paths),
        }
        return out

    def hash(self) -> str:
        """64-bit digest (16 hex chars) of the canonical config; paths excluded."""
        body = {k: v for k, v in self.to_dict().items() if k != "paths"}
        blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_ini(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for k, v in values.items():
                lines.append(f"{k} = {_fmt(v)}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        base = cls()
        run = d.get("run", {})
        world_kw = {**{k: v for k, v in dataclasses.asdict(base.world).items() if k != "seed"}, **d.get("world", {})}
        for key in ("train_template_family", "eval_template_family", "eval_class_weights"):
            if world_kw.get(key) is not None:
                world_kw[key] = tuple(world_kw[key])
        hyper_kw = {**dataclasses.asdict(base.hyper), **d.get("hyper", {})}
        sampler_kw = {**{"temperature": base.sampler.temperature, "max_trace_tokens": base.sampler.max_trace_tokens}, **d.get("sampler", {})}
        try:
            return cls(
                seed=int(run.get("seed", base.seed)),
                world=WorldConfig(**world_kw),
                sizes={**base.sizes, **d.get("sizes", {})},
                arch=ArchConfig(**{**dataclasses.asdict(base.arch), **d.get("model", {})}),
                hyper=Hyperparams(**hyper_kw),
                rewards=RewardConfig(**{**dataclasses.asdict(base.rewards), **d.get("rewards", {})}),
                sampler=SamplerConfig(**sampler_kw),
                paths=Paths(**{**dataclasses.asdict(base.paths), **d.get("paths", {})}),
                calibrator_init=run.get("calibrator_init", base.calibrator_init),
            )
        except TypeError as e:
            raise ConfigError(f"unknown config key: {e}") from None


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(raw: str, template):
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    if isinstance(template, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(template, (list, tuple)) or (template is None and "," in raw):
        parts = [p for p in raw.split(",") if p.strip()]
        return tuple(float(p) if "." in p or "e" in p.lower() else int(p) for p in parts)
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float) or template is None:
        return float(raw)
    return raw


def _typed(section: str, key: str, raw: str, defaults: dict):
    if section not in defaults:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in defaults[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    try:
        return _parse_value(raw, defaults[section][key])
    except ValueError as e:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({e})") from None


def load_config(path: str | os.PathLike | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Read an INI config (missing keys keep defaults) and apply ``section.key=value`` overrides."""
    defaults = RunConfig().to_dict()
    values: dict[str, dict] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys are case-sensitive (hyper.K)
        if not parser.read(path):
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                values.setdefault(section, {})[key] = _typed(section, key, raw, defaults)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        values.setdefault(section, {})[key] = _typed(section, key, raw, defaults)
    return RunConfig.from_dict(values)
