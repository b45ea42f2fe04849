"""INI experiment files for :class:`~fedsb.fedsim.FederationConfig`.

Keys are grouped into sections; a missing key keeps its default and an
optional key set to an empty value means "unset".  ``dumps`` writes every
key, so ``loads(dumps(cfg)) == cfg``.
"""
import configparser
import typing
from dataclasses import fields
from typing import Dict, Optional

from fedsb.fedsim import ConfigError, FederationConfig

SECTIONS: Dict[str, tuple] = {
    "method": ("method", "rank", "ranks", "alpha", "r_init", "init_source", "init_samples", "weighted"),
    "federation": ("clients", "rounds", "epochs", "batch_size", "lr", "partition"),
    "task": ("kind", "n_in", "hidden", "n_out", "loss", "samples", "noise_std", "delta_scale",
             "delta_rank", "isotropic", "sources", "input_shift"),
    "privacy": ("clip", "sigma", "epsilon", "delta"),
    "run": ("seed",),
}

_TYPES = {f.name: f.type for f in fields(FederationConfig)}
assert sorted(k for keys in SECTIONS.values() for k in keys) == sorted(_TYPES)


def _base_type(tp):
    optional = False
    if typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        tp, optional = args[0], True
    return tp, optional


def _parse_value(key: str, raw: str):
    tp, optional = _base_type(_TYPES[key])
    raw = raw.strip()
    if raw == "" or raw.lower() == "none":
        if optional:
            return None
        raise ConfigError(f"{key} may not be empty")
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typing.get_origin(tp) is tuple:
            return tuple(int(x) for x in raw.split(","))
        return tp(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def loads(text: str, base: Optional[FederationConfig] = None) -> FederationConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"unparseable config: {e}") from None
    values = {} if base is None else base.as_dict()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _parse_value(key, raw)
    return FederationConfig(**values)


def dumps(config: FederationConfig) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_format_value(getattr(config, k))}".rstrip() for k in keys)
        lines.append("")
    return "\n".join(lines)


def load(path) -> FederationConfig:
    with open(path) as fh:
        return loads(fh.read())
