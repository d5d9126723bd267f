"""Exception types shared across the toolkit.

The CLI maps these onto stable exit codes (see cli.EXIT_CODES), so raising
the right class here is part of the command-line contract.
"""


class PveraError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(PveraError):
    """Invalid configuration: bad flag value, inconsistent adapter setup."""


class ShapeError(ConfigError):
    """Tensor extents do not line up for the requested operation."""


class MissingInputError(PveraError):
    """A required file, dataset, or checkpoint does not exist."""


class StateError(PveraError):
    """Operation invalid in the current state (e.g. merging twice)."""


class ContractError(PveraError):
    """An operation was called outside its documented contract."""


class FormatError(PveraError):
    """A serialized file is malformed (bad magic, truncated, wrong extents)."""


class CheckFailedError(PveraError):
    """A verification command found a violation (e.g. gradient check)."""
