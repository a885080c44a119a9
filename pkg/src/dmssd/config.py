"""Flat ``key = value`` run configuration.

Every ``EnvConfig`` and ``PpoConfig`` field is addressable by name, plus
``variant`` (reward setting) and ``seed``. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .env import EnvConfig
from .errors import ConfigError
from .ppo import PpoConfig
from .rewards import RewardVariant

EXTRA_KEYS = {"variant": "ours", "seed": 0}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    variant: str = "ours"
    seed: int = 0

    @property
    def reward_variant(self) -> RewardVariant:
        return RewardVariant(self.variant)

    def to_text(self) -> str:
        lines = ["# resolved run configuration"]
        for obj in (self.env, self.ppo):
            for f in dataclasses.fields(obj):
                lines.append(f"{f.name} = {_show(getattr(obj, f.name))}")
        lines.append(f"variant = {self.variant}")
        lines.append(f"seed = {self.seed}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path


def _show(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _convert(name: str, raw: str, annotation: str):
    raw = raw.strip()
    optional = annotation.startswith("Optional[")
    base = annotation[len("Optional["):-1] if optional else annotation
    if optional and raw.lower() in ("none", ""):
        return None
    try:
        if base == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
        if base == "str":
            return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r} (expected {base})") from exc
    raise ConfigError(f"unsupported field type {annotation} for {name}")  # pragma: no cover


def _field_types(cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(cls)}


ENV_FIELDS = _field_types(EnvConfig)
PPO_FIELDS = _field_types(PpoConfig)


def known_keys() -> set[str]:
    return set(ENV_FIELDS) | set(PPO_FIELDS) | set(EXTRA_KEYS)


def parse_pairs(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(pairs: dict[str, str]) -> RunConfig:
    unknown = set(pairs) - known_keys()
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    env_kw = {k: _convert(k, v, ENV_FIELDS[k]) for k, v in pairs.items() if k in ENV_FIELDS}
    ppo_kw = {k: _convert(k, v, PPO_FIELDS[k]) for k, v in pairs.items() if k in PPO_FIELDS}
    variant = pairs.get("variant", EXTRA_KEYS["variant"])
    RewardVariant(variant)
    seed = _convert("seed", pairs["seed"], "int") if "seed" in pairs else EXTRA_KEYS["seed"]
    try:
        return RunConfig(EnvConfig(**env_kw), PpoConfig(**ppo_kw), variant, seed)
    except TypeError as exc:  # pragma: no cover
        raise ConfigError(str(exc)) from exc


def load_config(path: Optional[str] = None, overrides: Iterable[str] = (),
                extra: Optional[dict] = None) -> RunConfig:
    pairs: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        pairs.update(parse_pairs(p.read_text()))
    pairs.update(parse_overrides(overrides))
    for k, v in (extra or {}).items():
        if v is not None:
            pairs[k] = _show(v)
    return build_config(pairs)
