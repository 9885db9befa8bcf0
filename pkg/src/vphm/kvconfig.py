"""`name = value` text files with `#` comments.

Used for battery parameter presets, synthetic scenario specs and CLI run
configs. Values are parsed as int, float, bool, comma-separated float
tuples, or left as strings.
"""

from __future__ import annotations


def _parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    if "," in raw:
        try:
            return tuple(float(p) for p in raw.split(","))
        except ValueError:
            pass
    return raw


def loads(text: str) -> dict:
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected `name = value`, got {line!r}")
        key, _, raw = line.partition("=")
        out[key.strip()] = _parse_value(raw)
    return out


def load(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return loads(fh.read())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps(values: dict) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in values.items())


def dump(values: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(values))
