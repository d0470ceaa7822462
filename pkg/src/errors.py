# src/errors.py

# Exit codes used by the command-line runner
EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


class SensitivityError(Exception):
    """Base class for all errors raised by this package."""
    exit_code = EXIT_NUMERIC


class ConfigError(SensitivityError, ValueError):
    """Invalid user parameters: bad config keys, non-positive rates, unsupported families."""
    exit_code = EXIT_CONFIG


class NumericalError(SensitivityError, ArithmeticError):
    """Runtime numerical failure: non-finite states, unstable matrices, nonlinear response."""
    exit_code = EXIT_NUMERIC


class ArtifactIOError(SensitivityError, OSError):
    """Reading or writing configs, CSVs, checkpoints or manifests failed."""
    exit_code = EXIT_IO
