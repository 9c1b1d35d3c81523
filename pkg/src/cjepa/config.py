"""``[section] key = value`` run-config files mapped onto :class:`TrainConfig`.

Sections: ``[model] [masking] [vicreg] [schedules] [data] [run]``. Keys are
the dataclass field names; omitted keys keep their defaults and unknown
keys are rejected. The data section inherits its grid from ``[masking]``
and its patch length from ``[model]``.
"""
from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path
from typing import Iterable

from .errors import ConfigError
from .network import NetworkConfig
from .trainer import MaskingConfig, RunConfig, ScheduleConfig, SyntheticDatasetSpec, TrainConfig
from .vicreg import VicRegCoefficients

SECTIONS = {
    "model": NetworkConfig,
    "masking": MaskingConfig,
    "vicreg": VicRegCoefficients,
    "schedules": ScheduleConfig,
    "data": SyntheticDatasetSpec,
    "run": RunConfig,
}
# data fields that are copied from other sections rather than set directly
DERIVED_DATA_KEYS = {"grid_h": ("masking", "grid_h"), "grid_w": ("masking", "grid_w"), "patch_dim": ("model", "patch_dim")}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def section_keys(section: str) -> list[str]:
    names = [f.name for f in dataclasses.fields(SECTIONS[section])]
    if section == "data":
        names = [n for n in names if n not in DERIVED_DATA_KEYS]
    return names


def _coerce(section: str, key: str, raw: str):
    default = getattr(SECTIONS[section](), key)
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return text


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def build(values: dict[str, dict[str, str]]) -> TrainConfig:
    """Assemble a config from raw string values per section (already key-checked)."""
    parsed = {}
    for section in SECTIONS:
        raw = values.get(section, {})
        parsed[section] = {k: _coerce(section, k, v) for k, v in raw.items()}
    try:
        model = NetworkConfig(**parsed["model"])
        masking = MaskingConfig(**parsed["masking"])
        data_kwargs = dict(parsed["data"])
        for key, (src, field) in DERIVED_DATA_KEYS.items():
            data_kwargs[key] = getattr(model if src == "model" else masking, field)
        return TrainConfig(
            model=model,
            masking=masking,
            vicreg=VicRegCoefficients(**parsed["vicreg"]),
            schedules=ScheduleConfig(**parsed["schedules"]),
            data=SyntheticDatasetSpec(**data_kwargs),
            run=RunConfig(**parsed["run"]),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _check_key(section: str, key: str) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown section [{section}]; expected one of {list(SECTIONS)}")
    if key not in section_keys(section):
        raise ConfigError(f"unknown key {key!r} in [{section}]; expected one of {section_keys(section)}")


def parse(text: str, overrides: Iterable[str] = ()) -> TrainConfig:
    """Parse config text, then apply ``section.key=value`` overrides in order."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            _check_key(section, key)
            values.setdefault(section, {})[key] = raw
    for item in overrides:
        target, sep, raw = item.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        _check_key(section, key)
        values.setdefault(section, {})[key] = raw
    return build(values)


def load(path: str | Path | None = None, overrides: Iterable[str] = ()) -> TrainConfig:
    text = "" if path is None else Path(path).read_text()
    return parse(text, overrides)


def dumps(config: TrainConfig) -> str:
    """Every effective key, one per line; ``parse(dumps(c)) == c``."""
    lines = []
    for section in SECTIONS:
        obj = getattr(config, section)
        lines.append(f"[{section}]")
        for key in section_keys(section):
            lines.append(f"{key} = {_format(getattr(obj, key))}")
        lines.append("")
    return "\n".join(lines)
