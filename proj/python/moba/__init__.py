"""Block-sparse MoBA attention: kernels, oracles and verification suites."""

from ._core import (
    ConfigError,
    DegenerateRowError,
    DimensionError,
    DomainError,
    MobaError,
    ParameterError,
    dense_attention,
    fit_power_law,
    flop_report,
    moba_attention,
    moba_attention_reference,
    route_moba,
    run_suite,
    seeded_random,
    sparsity,
    suites,
)

__all__ = [
    "ConfigError",
    "DegenerateRowError",
    "DimensionError",
    "DomainError",
    "MobaError",
    "ParameterError",
    "dense_attention",
    "fit_power_law",
    "flop_report",
    "moba_attention",
    "moba_attention_reference",
    "route_moba",
    "run_suite",
    "seeded_random",
    "sparsity",
    "suites",
]
