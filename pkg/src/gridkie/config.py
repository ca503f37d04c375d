"""Run configuration: one flat dataclass bundle, a plain-text key-value
file format, and content hashing for resume safety checks."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .docmodel import FieldSchema
from .encoder import EncoderConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """A config file holds an unknown key or an unparsable value."""


@dataclass
class RunConfig:
    """Everything a training or evaluation run needs, file-serializable."""

    fields: tuple[str, ...] = ("TOTAL", "DATE", "COMPANY", "ADDRESS")
    late_fusion: bool = True
    tau1: float = 0.5
    tau2: float = 0.5
    vocab_file: str = ""      # empty selects character-level tokenization
    line_grouping: bool = True
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def schema(self) -> FieldSchema:
        return FieldSchema(field_names=tuple(self.fields))


_SECTIONS = {"encoder": EncoderConfig, "backbone": BackboneConfig, "train": TrainConfig}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, template):
    raw = raw.strip()
    try:
        if isinstance(template, bool):
            if raw not in ("true", "false"):
                raise ValueError(f"expected true/false, got {raw!r}")
            return raw == "true"
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, tuple):
            if not raw:
                return ()
            element = template[0]
            return tuple(_parse_value(item, element) for item in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_text(cfg: RunConfig) -> str:
    """Canonical key-value rendering (sorted keys, one per line)."""
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sub in dataclasses.fields(value):
                lines.append(f"{f.name}.{sub.name} = {_format_value(getattr(value, sub.name))}")
        else:
            lines.append(f"{f.name} = {_format_value(value)}")
    return "\n".join(sorted(lines)) + "\n"


def config_from_text(text: str) -> RunConfig:
    """Parse the key-value format; unknown keys are config errors."""
    defaults = RunConfig()
    root_kwargs: dict = {}
    section_kwargs: dict[str, dict] = {name: {} for name in _SECTIONS}

    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if "." in key:
            section, sub = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section {section!r}")
            template_obj = getattr(defaults, section)
            if not hasattr(template_obj, sub):
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            section_kwargs[section][sub] = _parse_value(raw, getattr(template_obj, sub))
        else:
            if not hasattr(defaults, key) or key in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            root_kwargs[key] = _parse_value(raw, getattr(defaults, key))

    try:
        sections = {name: cls(**section_kwargs[name]) for name, cls in _SECTIONS.items()}
        return RunConfig(**root_kwargs, **sections)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def simple_config_to_text(obj) -> str:
    """Key-value rendering of a flat dataclass (no nested sections)."""
    lines = [f"{f.name} = {_format_value(getattr(obj, f.name))}"
             for f in dataclasses.fields(obj)]
    return "\n".join(sorted(lines)) + "\n"


def simple_config_from_text(cls, text: str):
    """Parse a flat dataclass from the key-value format."""
    defaults = cls()
    kwargs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if not hasattr(defaults, key):
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kwargs[key] = _parse_value(raw, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def config_hash(cfg_or_text) -> str:
    text = cfg_or_text if isinstance(cfg_or_text, str) else config_to_text(cfg_or_text)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def diff_config_texts(a: str, b: str) -> list[str]:
    """Keys that differ between two canonical config texts."""
    parse = lambda t: dict(line.split(" = ", 1) for line in t.splitlines() if " = " in line)
    da, db = parse(a), parse(b)
    out = []
    for key in sorted(set(da) | set(db)):
        va, vb = da.get(key, "<absent>"), db.get(key, "<absent>")
        if va != vb:
            out.append(f"{key}: {va} != {vb}")
    return out
