"""Flat ``key = value`` run configuration.

Keys are the :class:`NetworkConfig` fields plus the run paths below;
``spectral.freq_pairs`` is accepted as an alias of ``freq_pairs``. Unknown
keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .network import NetworkConfig, config_items

PATH_KEYS = ("data", "eval_data", "out", "resume")
ALIASES = {"spectral.freq_pairs": "freq_pairs"}


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_value(name: str, text: str):
    default = {f.name: f.default for f in dataclasses.fields(NetworkConfig)}[name]
    text = text.strip()
    try:
        if name == "freq_pairs":
            pairs = []
            for item in text.split(","):
                a, b = item.split(":")
                pairs.append((int(a), int(b)))
            return tuple(pairs)
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace("x", ",").split(","))
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc
    return text


def network_config_from_items(items: dict[str, str]) -> NetworkConfig:
    known = {f.name for f in dataclasses.fields(NetworkConfig)}
    kwargs = {}
    for key, text in items.items():
        key = ALIASES.get(key, key)
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = _parse_value(key, text)
    try:
        return NetworkConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config_text(text: str) -> dict[str, str]:
    items = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    data: str | None = None
    eval_data: str | None = None
    out: str = "run"
    resume: str | None = None

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "RunConfig":
        paths = {k: v for k, v in items.items() if k in PATH_KEYS}
        net = {k: v for k, v in items.items() if k not in PATH_KEYS}
        return cls(network_config_from_items(net), **paths)

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None) -> "RunConfig":
        items = parse_config_text(Path(path).read_text()) if path else {}
        items.update(overrides or {})
        return cls.from_items(items)

    def to_text(self) -> str:
        lines = [f"{k} = {v}" for k, v in config_items(self.network).items()]
        for key in PATH_KEYS:
            value = getattr(self, key)
            if value is not None:
                lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"
