"""Exception types shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, ContractError -> 3,
DataError (and OSError) -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad shapes, keys, ranges, or mode combinations."""


class ContractError(RuntimeError):
    """A runtime contract or internal invariant was violated."""


class DataError(IOError):
    """Malformed input file. Carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
