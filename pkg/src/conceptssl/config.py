"""Flat ``section.key = value`` run configuration with provenance tracking.

Precedence is flags > file > defaults.  Unknown keys, type mismatches and
out-of-range values are errors that name the key and where it came from.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field

from .encoder import EncoderConfig
from .errors import ConceptSSLError, ConfigError
from .evaluation import ProbeConfig
from .objectives import ObjectiveConfig
from .pretrain import PretrainConfig
from .synth_world import WorldConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class RunSection:
    out_dir: str = "runs/default"
    data_dir: str = ""
    init_seed: int = 0
    dedup_threshold: float = 0.9
    normalize_descriptions: bool = True


SECTIONS = {
    "world": WorldConfig,
    "encoder": EncoderConfig,
    "objective": ObjectiveConfig,
    "train": TrainConfig,
    "probe": ProbeConfig,
    "pretrain": PretrainConfig,
    "run": RunSection,
}
_NESTED = {("train", "objective")}

_INT = re.compile(r"[+-]?\d+\Z")
_FLOAT = re.compile(r"[+-]?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?\Z")


def _fields(section: str) -> dict:
    return {f.name: f for f in dataclasses.fields(SECTIONS[section])
            if (section, f.name) not in _NESTED and f.init}


def _defaults(section: str) -> dict:
    inst = SECTIONS[section]()
    return {name: getattr(inst, name) for name in _fields(section)}


def parse_value(text: str):
    text = text.strip()
    if text in ("true", "false"):
        return text == "true"
    if len(text) >= 2 and text[0] == text[-1] == '"':
        return text[1:-1]
    if _INT.match(text):
        return int(text)
    if _FLOAT.match(text):
        return float(text)
    raise ValueError(f"cannot parse value {text!r} (expected integer, decimal, true/false or quoted string)")


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    return repr(value)


def _coerce(key: str, location: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, location, f"expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, location, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, location, f"expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, location, f"expected a quoted string, got {value!r}")
    return value


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)          # "section.key" -> value
    provenance: dict = field(default_factory=dict)      # "section.key" -> default|file|flag
    locations: dict = field(default_factory=dict)

    def section(self, name: str):
        kwargs = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(name + ".")}
        if name == "train":
            kwargs["objective"] = self.section("objective")
        return SECTIONS[name](**kwargs)

    @property
    def world(self) -> WorldConfig:
        return self.section("world")

    @property
    def encoder(self) -> EncoderConfig:
        return self.section("encoder")

    @property
    def objective(self) -> ObjectiveConfig:
        return self.section("objective")

    @property
    def train(self) -> TrainConfig:
        return self.section("train")

    @property
    def probe(self) -> ProbeConfig:
        return self.section("probe")

    @property
    def pretrain(self) -> PretrainConfig:
        return self.section("pretrain")

    @property
    def run(self) -> RunSection:
        return self.section("run")

    def dumps(self) -> str:
        lines = ["# resolved configuration; provenance after each value"]
        for key, value in self.values.items():
            lines.append(f"{key} = {format_value(value)}  # {self.provenance[key]}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())


def _strip_comment(line: str) -> str:
    out, quoted = [], False
    for ch in line:
        if ch == '"':
            quoted = not quoted
        if ch == "#" and not quoted:
            break
        out.append(ch)
    return "".join(out)


def read_config_file(path) -> list[tuple[str, str, str]]:
    """``(key, raw value, location)`` triples from a config file."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = _strip_comment(line).strip()
            if not body:
                continue
            key, sep, raw = body.partition("=")
            location = f"{path}:{lineno}"
            if not sep:
                raise ConfigError(body, location, "expected 'section.key = value'")
            entries.append((key.strip(), raw.strip(), location))
    return entries


def parse_config(path=None, overrides=()) -> RunConfig:
    """Resolve defaults, then the file at ``path``, then ``overrides`` ``[(key, raw), ...]``."""
    cfg = RunConfig()
    for section in SECTIONS:
        for name, value in _defaults(section).items():
            key = f"{section}.{name}"
            cfg.values[key] = value
            cfg.provenance[key] = "default"
            cfg.locations[key] = "default"
    layers = []
    if path is not None:
        layers += [(k, v, loc, "file") for k, v, loc in read_config_file(path)]
    layers += [(k, v, f"--{k}", "flag") for k, v in overrides]
    for key, raw, location, origin in layers:
        if key not in cfg.values:
            raise ConfigError(key, location, "unknown key")
        section, name = key.split(".", 1)
        default = _defaults(section)[name]
        if origin == "flag" and isinstance(default, str) and isinstance(raw, str) and not raw.startswith('"'):
            value = raw         # shells strip quotes, so bare strings are fine on the command line
        else:
            try:
                value = parse_value(raw) if isinstance(raw, str) else raw
            except ValueError as exc:
                raise ConfigError(key, location, str(exc)) from None
        cfg.values[key] = _coerce(key, location, value, default)
        cfg.provenance[key] = origin
        cfg.locations[key] = location
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    for section in SECTIONS:
        try:
            cfg.section(section)
        except ConceptSSLError as exc:
            # find the offending key: the first non-default key that fails on its own
            for key, origin in cfg.provenance.items():
                if origin == "default" or not key.startswith(section + "."):
                    continue
                kwargs = {key.split(".", 1)[1]: cfg.values[key]}
                try:
                    SECTIONS[section](**kwargs)
                except ConceptSSLError:
                    raise ConfigError(key, cfg.locations[key], str(exc)) from None
            raise ConfigError(section, "combined settings", str(exc)) from None
