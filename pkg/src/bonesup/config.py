"""Flat ``key = value`` run configuration files.

Blank lines and ``#`` comments are ignored.  Values are parsed as ``none``,
int, float or left as strings; the consumer dataclass validates them.
"""

from __future__ import annotations

from .errors import ConfigError


def parse_value(text):
    text = text.strip()
    if text.lower() in ("none", "null", ""):
        return None
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_config(text, allowed, source="<config>"):
    """Parse config text; keys outside ``allowed`` raise :class:`ConfigError`."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in allowed:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = parse_value(value)
    return values


def read_config(path, allowed):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), allowed, source=path)


def merge(file_values, flag_values):
    """Flags (entries that are not None) override file values."""
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    return merged


def dump_config(values):
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())


def write_config(values, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_config(values))
