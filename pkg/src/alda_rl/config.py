"""Experiment configuration (JSON, schema-versioned) and named seed streams."""

from __future__ import annotations

import dataclasses
import json
import os
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np
import torch

from .alda import AldaConfig
from .sac import SacConfig
from .toyenv import SHIFT_KINDS, EnvConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    steps: int = 30_000
    out_dir: str = "runs/alda"
    eval_every: int = 5_000
    eval_episodes: int = 10
    eval_shifts: Tuple[str, ...] = SHIFT_KINDS
    metrics_every: int = 500
    checkpoint_every: int = 10_000

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if min(self.eval_every, self.eval_episodes, self.metrics_every, self.checkpoint_every) < 1:
            raise ValueError("cadences and eval_episodes must be >= 1")
        bad = [s for s in self.eval_shifts if s not in SHIFT_KINDS]
        if bad:
            raise ValueError(f"unknown shift kinds {bad}")


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    alda: AldaConfig = field(default_factory=AldaConfig)
    sac: SacConfig = field(default_factory=SacConfig)
    schema_version: int = SCHEMA_VERSION

    @property
    def seed(self) -> int:
        return self.run.seed

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["run"]["eval_shifts"] = list(d["run"]["eval_shifts"])
        d["sac"]["betas"] = list(d["sac"]["betas"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **sections) -> "ExperimentConfig":
        """``cfg.replace(alda={"beta": 10.0}, run={"seed": 3})``."""
        changes = {}
        for name, updates in sections.items():
            changes[name] = dataclasses.replace(getattr(self, name), **updates)
        return dataclasses.replace(self, **changes)


_SECTIONS = {"run": RunConfig, "env": EnvConfig, "alda": AldaConfig, "sac": SacConfig}
_TUPLE_FIELDS = {("run", "eval_shifts"), ("sac", "betas")}


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 0


def from_dict(data: Dict[str, Any], text: str = "") -> ExperimentConfig:
    """Validate and build a config; unknown keys and bad values raise ConfigError."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"line {_line_of(text, 'schema_version')}: unsupported schema_version {version}")
    sections = {}
    for key, value in data.items():
        if key == "schema_version":
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"line {_line_of(text, key)}: unknown config section {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"line {_line_of(text, key)}: section {key!r} must be an object")
        cls = _SECTIONS[key]
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for k, v in value.items():
            if k not in known:
                raise ConfigError(f"line {_line_of(text, k)}: unknown key {key}.{k}")
            if (key, k) in _TUPLE_FIELDS:
                v = tuple(v)
            elif known[k].type in ("int", int) and isinstance(v, bool):
                raise ConfigError(f"line {_line_of(text, k)}: {key}.{k} must be an integer")
            elif known[k].type in ("float", float) and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
            kwargs[k] = v
        try:
            sections[key] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            first = next(iter(value), key)
            raise ConfigError(f"line {_line_of(text, first)}: invalid section {key!r}: {exc}") from exc
    return ExperimentConfig(**sections)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}: {exc.msg}") from exc
    return from_dict(data, text)


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_json(), encoding="utf-8")
    return path


def output_root() -> Path:
    return Path(os.environ.get("ALDA_OUT", "."))


def resolve_out_dir(out_dir: str) -> Path:
    p = Path(out_dir)
    return p if p.is_absolute() else output_root() / p


# ---------------------------------------------------------------------------
# seed streams


def stream_seed(seed: int, name: str) -> np.random.SeedSequence:
    """Independent child of ``seed`` keyed by ``name`` (order-independent)."""
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),))


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Counter-based (Philox) generator for a named sub-stream."""
    return np.random.Generator(np.random.Philox(stream_seed(seed, name)))


def int_seed(seed: int, name: str) -> int:
    return int(stream_seed(seed, name).generate_state(1, dtype=np.uint32)[0])


def torch_generator(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(stream_seed(seed, name).generate_state(1, dtype=np.uint64)[0]))
    return g
