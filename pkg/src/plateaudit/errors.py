"""Exception and warning types shared across the package."""


class PlateAuditError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(PlateAuditError):
    """A file does not conform to its container format (bad magic, dims, keys)."""


class CorruptionError(FormatError):
    """A file parsed structurally but its payload is damaged (truncation, NaNs)."""


class ValidationError(PlateAuditError):
    """A value object violates its invariants (e.g. dangling cell-line ids)."""


class ConfigError(PlateAuditError):
    """A configuration value is out of range, unknown, or inconsistent."""


class InputError(PlateAuditError):
    """Caller-supplied data is malformed (non-finite values, length mismatch)."""


class SchemaError(PlateAuditError):
    """Data does not match a fixed schema (feature count, model feature width)."""


class DegenerateInputError(InputError):
    """Input carries no usable signal (e.g. zero variance everywhere)."""


class DegenerateLabelsError(InputError):
    """A label vector with fewer than two classes was supplied to a classifier."""


class ConvergenceError(PlateAuditError):
    """An iterative fit failed to converge within its iteration budget."""


class AffinityDegeneracyError(PlateAuditError):
    """Too many coincident points for the perplexity calibration to succeed."""


class UndefinedMetricError(PlateAuditError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class JoinError(PlateAuditError):
    """External rows could not be joined against the manifest."""


class PairingError(PlateAuditError):
    """A held-out pair specification is invalid."""


class AuditError(PlateAuditError):
    """An audit cannot run on the given data (too few samples, no controls)."""


class DegenerateInputWarning(UserWarning):
    """Emitted when an operation receives degenerate input and falls back to a
    documented convention instead of failing."""
