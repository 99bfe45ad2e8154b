"""
Exception hierarchy for Waymark.
Every error carries the process exit code the CLI reports for it.
"""

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_ARTIFACT = 4


class WaymarkError(Exception):
    """Base class for all expected failures."""
    exit_code = 1


class ConfigError(WaymarkError, ValueError):
    """Invalid or unknown configuration values."""
    exit_code = EXIT_VALIDATION


class ShapeMismatchError(WaymarkError, ValueError):
    """Operand shapes do not conform; the message names the offending axis."""
    exit_code = EXIT_VALIDATION


class DomainError(WaymarkError, ValueError):
    """Operation evaluated outside its mathematical domain."""
    exit_code = EXIT_NUMERIC


class UnsupportedStrideError(WaymarkError, ValueError):
    exit_code = EXIT_VALIDATION


class CoordinateError(WaymarkError, ValueError):
    """Voxel coordinates violate lattice, extent or uniqueness rules."""
    exit_code = EXIT_VALIDATION


class DataError(WaymarkError, ValueError):
    """Dataset content or layout problems."""
    exit_code = EXIT_VALIDATION


class NumericError(WaymarkError, ArithmeticError):
    """NaN / non-finite values in losses, gradients or descriptors."""
    exit_code = EXIT_NUMERIC


class ArtifactMismatchError(WaymarkError):
    """Checkpoint or report does not match what the caller asked for."""
    exit_code = EXIT_ARTIFACT
