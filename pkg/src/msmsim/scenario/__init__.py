"""Scenario description language: expressions, file format and data model."""

from .expr import DictEnv, Env, eval_expression, parse_expression, to_source
from .model import (
    CompetingSpec,
    Dims,
    DistKind,
    DistributionSpec,
    Link,
    Mode,
    MsmSpec,
    MsmTerm,
    PerVisit,
    RefreshSpec,
    Scenario,
    Variant,
    load_scenario,
    parse_scenario,
    sample_distribution,
    serialize_scenario,
    validate_scenario,
)

__all__ = [
    "CompetingSpec",
    "DictEnv",
    "Dims",
    "DistKind",
    "DistributionSpec",
    "Env",
    "Link",
    "Mode",
    "MsmSpec",
    "MsmTerm",
    "PerVisit",
    "RefreshSpec",
    "Scenario",
    "Variant",
    "eval_expression",
    "load_scenario",
    "parse_expression",
    "parse_scenario",
    "sample_distribution",
    "serialize_scenario",
    "to_source",
    "validate_scenario",
]
