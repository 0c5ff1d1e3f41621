"""Flat ``key = value`` text files used for run configs and class schemas."""

from __future__ import annotations

import os


class ConfigError(ValueError):
    """Raised for unreadable or malformed key/value files.

    ``line`` is 1-based when the problem can be pinned to one line.
    """

    def __init__(self, message: str, path: str | os.PathLike | None = None, line: int | None = None, key: str | None = None):
        self.path = None if path is None else os.fspath(path)
        self.line = line
        self.key = key
        where = []
        if self.path is not None:
            where.append(self.path)
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        prefix = ": ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


def parse_kv_text(text: str, path=None) -> dict[str, tuple[str, int]]:
    """Parse ``key = value`` lines into ``{key: (value, line_number)}``.

    Blank lines and lines starting with ``#`` are skipped. Duplicate keys are
    an error.
    """
    out: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", path, lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", path, lineno)
        if key in out:
            raise ConfigError(f"duplicate key (first set on line {out[key][1]})", path, lineno, key)
        out[key] = (value, lineno)
    return out


def read_kv_file(path) -> dict[str, tuple[str, int]]:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError("file not found", path) from None
    except OSError as exc:
        raise ConfigError(f"cannot read file ({exc.strerror})", path) from None
    return parse_kv_text(text, path)


def parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")
