"""Run configuration: INI-style sections mapped onto dataclasses.

Every section is a flat ``key = value`` list; keys are the dataclass field
names.  Unknown sections or keys are errors.  ``inf`` is accepted for float
keys, and ``none`` clears optional ones.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import typing
from dataclasses import dataclass, field

from .channel import ChannelConfig
from .core import BUFFER_LEN
from .errors import ConfigError
from .pipeline import StreamPlan
from .txgen import ModulationFormat, TxConfig


@dataclass
class ImddSection:
    eq_taps: int = 503
    eq_lambda: float = 1e-3
    hysteresis: float = 0.1
    thresholds: str = ""  # comma-separated normalized thresholds; empty = ideal midpoints


@dataclass
class KkSection:
    dc_offset: str = "auto"  # a number, or "auto" for a grid search on calibration buffers
    dc_grid_points: int = 9
    eq_taps: int = 203
    eq_lambda: float = 1e-3
    carrier_notch_weight: float = 1e4
    stopband_lambda: float = 1e2
    mu: float = 5e-4
    train_symbols: int = 20000
    intensity_floor: float = 1e-6
    widely_linear: bool = True


@dataclass
class RunSection:
    buffer_len: int = BUFFER_LEN
    n_buffers: int = 4
    calibration_buffers: int = 1


@dataclass
class SweepSection:
    axis: str = "osnr"
    grid: str = ""  # comma-separated axis values
    min_errors: int = 100
    max_bits: int = 8_000_000
    max_buffers: int = 64
    window_s: float = 21e-3

    def values(self) -> list[float]:
        return [float(v) for v in self.grid.replace(";", ",").split(",") if v.strip()]


SECTIONS = {
    "tx": ("tx", TxConfig),
    "channel": ("channel", ChannelConfig),
    "imdd": ("imdd", ImddSection),
    "kk": ("kk", KkSection),
    "pipeline": ("plan", StreamPlan),
    "run": ("run", RunSection),
    "sweep": ("sweep", SweepSection),
}


@dataclass
class RunConfig:
    tx: TxConfig = field(default_factory=TxConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    imdd: ImddSection = field(default_factory=ImddSection)
    kk: KkSection = field(default_factory=KkSection)
    plan: StreamPlan = field(default_factory=StreamPlan)
    run: RunSection = field(default_factory=RunSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    @property
    def chain(self) -> str:
        return "kk" if self.tx.format.is_qam else "imdd"

    def with_values(self, values: dict[str, str]) -> "RunConfig":
        """Copy with ``{"section.key": "text"}`` overrides applied."""
        by_section: dict[str, dict[str, str]] = {}
        for dotted, text in values.items():
            section, _, key = dotted.partition(".")
            if not key:
                raise ConfigError(f"override {dotted!r} must look like section.key")
            by_section.setdefault(section, {})[key] = text
        return _build(by_section, base=self)

    def flat(self) -> dict[str, object]:
        """``section.key -> value`` for every key (the documented defaults table)."""
        out = {}
        for section, (attr, cls) in SECTIONS.items():
            obj = getattr(self, attr)
            for f in dataclasses.fields(cls):
                if f.init:
                    out[f"{section}.{f.name}"] = getattr(obj, f.name)
        return out


def _parse_value(text: str, hint, key: str):
    t = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)) and type(None) in args:
        if t.lower() in ("none", ""):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = t.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(t)
        if hint is int:
            return int(float(t)) if float(t).is_integer() else int(t)
        if hint is float:
            v = float(t)
            if math.isnan(v):
                raise ValueError(t)
            return v
        if hint is ModulationFormat:
            return ModulationFormat.parse(t)
        if hint is str:
            return t
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigError(f"{key}: unsupported field type {hint}")


def _build(sections: dict[str, dict[str, str]], base: RunConfig | None = None) -> RunConfig:
    base = base if base is not None else RunConfig()
    kwargs = {}
    for name, keys in sections.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        attr, cls = SECTIONS[name]
        hints = typing.get_type_hints(cls)
        known = {f.name for f in dataclasses.fields(cls) if f.init}
        current = getattr(base, attr)
        values = {f: getattr(current, f) for f in known}
        for key, text in keys.items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            values[key] = _parse_value(text, hints[key], f"{name}.{key}")
        if cls is TxConfig and "format" in keys:
            # format-dependent defaults are re-derived unless set explicitly
            for k in ("baud", "rolloff", "span_symbols", "cspr_db"):
                if k not in keys:
                    values[k] = None
        try:
            kwargs[attr] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from None
    return dataclasses.replace(base, **kwargs)


def load_config(path=None, text: str | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        if text is not None:
            parser.read_string(text)
        elif path is not None:
            with open(path) as fh:
                parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return _build({s: dict(parser.items(s)) for s in parser.sections()})


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, (attr, cls) in SECTIONS.items():
        lines.append(f"[{section}]")
        obj = getattr(cfg, attr)
        for f in dataclasses.fields(cls):
            if f.init:
                v = getattr(obj, f.name)
                lines.append(f"{f.name} = {'none' if v is None else v}")
        lines.append("")
    return "\n".join(lines)
