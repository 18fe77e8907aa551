"""Exception types mapped to distinct CLI exit codes."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (exit code 2)."""


class DataError(ValueError):
    """Malformed or out-of-range input data (exit code 3)."""


class NumericError(RuntimeError):
    """Numerical failure (Cholesky breakdown, non-finite objective; exit code 4)."""
