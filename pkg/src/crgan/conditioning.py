"""Multi-hot condition vectors and the class schemas that index them.

A condition is a binary vector of fixed length ``C`` with a 1 at every class
the image must contain. Listing a class twice still yields a single 1.
Conditions are stored as ``uint8`` and only become floats at the network
boundary.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .kvfile import ConfigError, read_kv_file


class SchemaError(ValueError):
    """A class index, name, or condition vector does not fit the schema."""


@dataclass(frozen=True)
class ConditionSchema:
    num_classes: int
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if self.num_classes < 2:
            raise SchemaError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.names) != self.num_classes:
            raise SchemaError(f"expected {self.num_classes} class names, got {len(self.names)}")
        if any(not n.strip() for n in self.names):
            raise SchemaError("class names must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise SchemaError("class names must be unique")

    def index_of(self, token: str | int) -> int:
        """Resolve a class name or decimal index to an index."""
        if isinstance(token, (int, np.integer)):
            idx = int(token)
        else:
            token = token.strip()
            if token in self.names:
                return self.names.index(token)
            try:
                idx = int(token)
            except ValueError:
                raise SchemaError(f"unknown class {token!r}") from None
        if not 0 <= idx < self.num_classes:
            raise SchemaError(f"class index {idx} outside [0, {self.num_classes})")
        return idx

    def parse_classes(self, csv: str) -> list[int]:
        tokens = [t for t in csv.split(",") if t.strip()]
        return [self.index_of(t) for t in tokens]


def mnist_schema() -> ConditionSchema:
    return ConditionSchema(10, tuple(str(d) for d in range(10)))


# Eleven class groups of the urban-scene experiment; shipped as a schema example only.
CITYSCAPES_GROUPS = (
    "road",
    "ground",
    "buildings",
    "fences/railings",
    "traffic lights, light poles",
    "nature",
    "sky",
    "people",
    "4w vehicles",
    "bikes",
    "trains",
)


def cityscapes_schema() -> ConditionSchema:
    return ConditionSchema(len(CITYSCAPES_GROUPS), CITYSCAPES_GROUPS)


def load_schema(path: str | os.PathLike) -> ConditionSchema:
    """Read a schema file with ``num_classes`` and ``class.<i>.name`` keys."""
    entries = read_kv_file(path)
    if "num_classes" not in entries:
        raise ConfigError("missing required key", path, key="num_classes")
    value, line = entries.pop("num_classes")
    try:
        num_classes = int(value)
    except ValueError:
        raise ConfigError(f"not an integer: {value!r}", path, line, "num_classes") from None
    names: dict[int, str] = {}
    for key, (value, line) in entries.items():
        parts = key.split(".")
        if len(parts) != 3 or parts[0] != "class" or parts[2] != "name" or not parts[1].isdigit():
            raise ConfigError("unknown key (expected class.<index>.name)", path, line, key)
        idx = int(parts[1])
        if idx >= num_classes:
            raise ConfigError(f"class index {idx} outside [0, {num_classes})", path, line, key)
        names[idx] = value
    missing = [i for i in range(num_classes) if i not in names]
    if missing:
        raise ConfigError(f"no name given for class indices {missing}", path)
    try:
        return ConditionSchema(num_classes, tuple(names[i] for i in range(num_classes)))
    except SchemaError as exc:
        raise ConfigError(str(exc), path) from None


def dump_schema(schema: ConditionSchema) -> str:
    lines = [f"num_classes = {schema.num_classes}"]
    lines += [f"class.{i}.name = {name}" for i, name in enumerate(schema.names)]
    return "\n".join(lines) + "\n"


def make_condition(classes: Iterable[int], schema: ConditionSchema | int) -> np.ndarray:
    """Build the multi-hot vector for a set of class indices.

    Duplicates collapse to a single 1. The result is a read-only ``uint8``
    array of length ``schema.num_classes``.
    """
    num_classes = schema if isinstance(schema, int) else schema.num_classes
    bits = np.zeros(num_classes, dtype=np.uint8)
    for c in classes:
        c = int(c)
        if not 0 <= c < num_classes:
            raise SchemaError(f"class index {c} outside [0, {num_classes})")
        bits[c] = 1
    bits.flags.writeable = False
    return bits


def check_condition(bits: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    """Validate a condition vector (or a ``B x C`` stack of them)."""
    bits = np.asarray(bits)
    if num_classes is not None and bits.shape[-1] != num_classes:
        raise SchemaError(f"condition length {bits.shape[-1]} != num_classes {num_classes}")
    if not np.all((bits == 0) | (bits == 1)):
        raise SchemaError("condition entries must be exactly 0 or 1")
    return bits


def condition_classes(bits: np.ndarray) -> frozenset[int]:
    return frozenset(int(i) for i in np.flatnonzero(np.asarray(bits)))


def condition_for_generator(bits: np.ndarray) -> np.ndarray:
    """Cast to the float32 vector fed to the generator's condition layer."""
    return check_condition(bits).astype(np.float32)


def condition_to_spatial(bits: np.ndarray, height: int, width: int) -> np.ndarray:
    """Broadcast a condition to constant planes, ``C x H x W``.

    A ``B x C`` stack gives ``B x C x H x W``.
    """
    if height < 1 or width < 1:
        raise ValueError(f"height and width must be positive, got {height}x{width}")
    bits = condition_for_generator(bits)
    return np.broadcast_to(bits[..., None, None], bits.shape + (height, width)).copy()


def sample_distinct_pairs(rng: np.random.Generator, n: int, num_classes: int = 10) -> np.ndarray:
    """Draw ``n`` conditions uniformly over unordered pairs of distinct classes."""
    first = rng.integers(0, num_classes, size=n)
    # offset in [1, C) guarantees a distinct second class; uniform over ordered pairs
    second = (first + rng.integers(1, num_classes, size=n)) % num_classes
    out = np.zeros((n, num_classes), dtype=np.uint8)
    rows = np.arange(n)
    out[rows, first] = 1
    out[rows, second] = 1
    return out


def stack_conditions(conditions: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(c, dtype=np.uint8) for c in conditions])
