"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract, so raising the right
class matters more than the message wording.
"""


class OdfuseError(Exception):
    """Base class for all package errors."""


class ConfigError(OdfuseError):
    """Bad run configuration, CLI usage, or network-config schema violation."""


class DataError(OdfuseError):
    """Malformed or inconsistent input data (CSV rows, joins, missing artifacts)."""


class InternalError(OdfuseError):
    """An internal invariant was violated; indicates a bug, not bad input."""
