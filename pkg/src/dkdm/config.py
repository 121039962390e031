"""Flat ``key = value`` experiment configs validated against ``schema.cfg``."""

import os
from dataclasses import dataclass
from importlib import resources

from dkdm.errors import ConfigError

INPUT_PATHS = ("teacher.checkpoint", "data.path", "eval.checkpoint", "sample.checkpoint")
REQUIRED = "!"
UNSET = "-"


@dataclass
class Field:
    key: str
    type: str
    default: str


def _schema_lines(text):
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield n, line


def load_schema(text=None):
    if text is None:
        text = resources.files("dkdm").joinpath("schema.cfg").read_text()
    fields = {}
    for n, line in _schema_lines(text):
        parts = line.split()
        if len(parts) != 3:
            raise ConfigError("schema line needs key, type and default", n, "schema.cfg")
        fields[parts[0]] = Field(*parts)
    return fields


def _bool(s):
    low = s.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true or false, got {s!r}")


def convert(value, typ):
    """Parse the string ``value`` as schema type ``typ``; raises ValueError."""
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    if typ == "bool":
        return _bool(value)
    if typ in ("str", "path"):
        return value
    if typ.startswith("enum:"):
        choices = typ[5:].split("|")
        if value not in choices:
            raise ValueError(f"expected one of {', '.join(choices)}, got {value!r}")
        return value
    if typ in ("ints", "floats", "strs"):
        items = [v.strip() for v in value.split(",") if v.strip()]
        cast = {"ints": int, "floats": float, "strs": str}[typ]
        return tuple(cast(v) for v in items)
    raise ValueError(f"unknown schema type {typ!r}")


class Config:
    """Typed view of a parsed config; index with dotted keys."""

    def __init__(self, values, path=None, lines=None):
        self.values = values
        self.path = path
        self.lines = lines or {}

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        v = self.values.get(key)
        return default if v is None else v

    def section(self, prefix):
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def to_text(self):
        """Canonical ``key = value`` listing of every set key."""
        out = []
        for k in sorted(self.values):
            v = self.values[k]
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{k} = {v}")
        return "\n".join(out) + "\n"


def parse_config(text, path=None, overrides=(), schema=None):
    """Parse config ``text``; ``overrides`` are extra ``key=value`` strings applied last.

    Errors carry the offending line number (overrides report no line).
    """
    schema = schema or load_schema()
    raw, lines = {}, {}
    entries = [(n, line) for n, line in _schema_lines(text)]
    entries += [(None, o) for o in overrides]
    for n, line in entries:
        where = path if n is not None else "override"
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected `key = value`, got {line!r}", n, where)
        if key not in schema:
            raise ConfigError(f"unknown key {key!r}", n, where)
        if key in raw and n is not None and lines.get(key) is not None:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", n, where)
        raw[key], lines[key] = value, n
    base = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()
    values = {}
    for key, f in schema.items():
        if key in raw:
            s = raw[key]
        elif f.default == REQUIRED:
            raise ConfigError(f"missing required key {key!r}", None, path)
        elif f.default == UNSET:
            values[key] = None
            continue
        else:
            s = f.default
        try:
            v = convert(s, f.type) if s != "" else None
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", lines.get(key), path if lines.get(key) else None) from None
        if f.type == "path" and v is not None:
            v = os.path.normpath(os.path.join(base, os.path.expanduser(v)))
            if key in INPUT_PATHS and not os.path.exists(v):
                raise ConfigError(f"{key}: no such file or directory {v!r}", lines.get(key), path)
        values[key] = v
    return Config(values, path, lines)


def load_config(path, overrides=()):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, path) from None
    return parse_config(text, path, overrides)
