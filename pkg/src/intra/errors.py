"""Exception hierarchy. Exit codes are what the CLI reports on failure."""


class IntraError(Exception):
    exit_code = 1


class ConfigError(IntraError):
    """Bad or missing configuration."""
    exit_code = 2


class DataError(IntraError):
    """Bad input data: malformed files, out-of-range ids, infeasible specs."""
    exit_code = 3


class BadMagicError(DataError):
    """File does not start with the expected magic bytes."""


class BadVersionError(DataError):
    """File carries an unsupported format version."""


class TruncatedFileError(DataError):
    """File ends before its declared payload does."""


class InternalError(IntraError):
    """Invariant violation inside the engine (non-finite activations, ...)."""
    exit_code = 4
