"""Coefficient reconstruction for the 2D acoustic wave equation (QRM and BCM)."""

from ._atomo import (
    AtomoError,
    RunConfig,
    add_noise,
    compare,
    euler_gamma,
    extract_limits,
    invert,
    known_keys,
    load_config,
    parse_config,
    read_field,
    selftest,
    sigma_filter,
    simulate,
    truncated_laplace,
    truth_field,
)

__all__ = [
    "AtomoError",
    "RunConfig",
    "add_noise",
    "compare",
    "euler_gamma",
    "extract_limits",
    "invert",
    "known_keys",
    "load_config",
    "parse_config",
    "read_field",
    "selftest",
    "sigma_filter",
    "simulate",
    "truncated_laplace",
    "truth_field",
]
