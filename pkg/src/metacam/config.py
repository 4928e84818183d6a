"""Run configuration: one INI file with a section per component.

    [synth]     generator (SynthConfig)
    [encoder]   encoder shape (EncoderConfig minus input_dim, taken from synth)
    [train]     training loop (TrainConfig): gamma, inner_lr, tau, alpha, n_mtr, batch_size (n_b), ...
    [mining]    pseudo-label mining (MiningParams)
    [eval]      distance statistics (max_pairs, n_bins, gap_seed)

Values are plain literals; ``none`` means unset and tuples are comma
separated.  ``section.key=value`` overrides apply on top of a file.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .clustering import MiningParams
from .datagen import SynthConfig
from .encoder import EncoderConfig
from .metatrainer import TrainConfig


@dataclass(frozen=True)
class EvalOptions:
    max_pairs: int = 50_000
    n_bins: int = 40
    gap_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mining: MiningParams = field(default_factory=MiningParams)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def __post_init__(self):
        if self.encoder.input_dim != self.synth.input_dim:
            object.__setattr__(self, "encoder", replace(self.encoder, input_dim=self.synth.input_dim))

    def with_overrides(self, overrides: dict[str, dict[str, str]]) -> RunConfig:
        parts = {}
        for section, cls in SECTIONS.items():
            current = getattr(self, section)
            raw = overrides.get(section, {})
            parts[section] = replace(current, **_parse_section(cls, raw, section)) if raw else current
        unknown = set(overrides) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        return RunConfig(**parts)

    def set(self, *assignments: str) -> RunConfig:
        """Apply ``section.key=value`` strings."""
        return self.with_overrides(parse_assignments(assignments))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section in SECTIONS:
            obj = getattr(self, section)
            cp[section] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj) if _serialized(section, f.name)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]


SECTIONS = {
    "synth": SynthConfig,
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "mining": MiningParams,
    "eval": EvalOptions,
}


class ConfigError(ValueError):
    pass


def _serialized(section: str, name: str) -> bool:
    return not (section == "encoder" and name == "input_dim")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(text: str, hint, where: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if text.lower() == "none" and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _convert(text, inner, where)
    if origin is tuple:
        inner = args[0]
        return tuple(_convert(t, inner, where) for t in text.split(",") if t.strip())
    try:
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("true", "1", "yes", "on")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {hint.__name__}") from None
    if hint is str:
        return text
    raise ConfigError(f"{where}: unsupported field type {hint}")


def _parse_section(cls, raw: dict[str, str], section: str) -> dict:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls) if _serialized(section, f.name)}
    out = {}
    for key, text in raw.items():
        if key not in names:
            raise ConfigError(f"unknown key {section}.{key}")
        out[key] = _convert(text, hints[key], f"{section}.{key}")
    return out


def parse_assignments(assignments) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in assignments:
        lhs, sep, value = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot or not key:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        out.setdefault(section, {})[key] = value
    return out


def from_ini(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    raw = {s: dict(cp[s]) for s in cp.sections()}
    try:
        return (base or RunConfig()).with_overrides(raw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load(path: str | Path | None, overrides=(), base: RunConfig | None = None) -> RunConfig:
    base = base or standard_config()
    cfg = from_ini(Path(path).read_text(), base) if path else base
    try:
        return cfg.set(*overrides)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def standard_config() -> RunConfig:
    """Desk-scale configuration used by the CLI defaults and the acceptance suite.

    Training and mining differ from the component defaults: larger outer and
    inner rates suit the small encoder, and a looser, denser clustering
    keeps the mined clusters from chaining across identities."""
    return RunConfig(
        synth=SynthConfig(),
        encoder=EncoderConfig(),
        train=TrainConfig(gamma=1e-2, inner_lr=0.1, epochs=20, warmup_epochs=5),
        mining=MiningParams(eps_percentile=1.0, min_pts=8),
    )


def as_dict(cfg: RunConfig) -> dict:
    return {s: dataclasses.asdict(getattr(cfg, s)) for s in SECTIONS}
