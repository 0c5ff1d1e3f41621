"""Collapse-resistant conditional DCGAN with a batch-volume discriminator branch."""

from .conditioning import (
    ConditionSchema,
    SchemaError,
    condition_for_generator,
    condition_to_spatial,
    make_condition,
    mnist_schema,
)

__version__ = "0.1.0"

__all__ = [
    "ConditionSchema",
    "SchemaError",
    "condition_for_generator",
    "condition_to_spatial",
    "make_condition",
    "mnist_schema",
]
