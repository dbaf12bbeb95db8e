"""plateaudit: synthesize plate-microscopy experiments with ground-truth
confounders, and audit feature tables for the nuisance signal they inject."""

from . import audit, core, features, imaging, learn, project, simulate, storage
from .core import (
    CellLine,
    ExperimentManifest,
    RngStream,
    SiteEntry,
    SiteImage,
    SiteKey,
    WellAddress,
    derive_seed,
    derive_stream,
)
from .errors import PlateAuditError

__version__ = "0.1.0"

__all__ = [
    "audit",
    "core",
    "features",
    "imaging",
    "learn",
    "project",
    "simulate",
    "storage",
    "CellLine",
    "ExperimentManifest",
    "RngStream",
    "SiteEntry",
    "SiteImage",
    "SiteKey",
    "WellAddress",
    "derive_seed",
    "derive_stream",
    "PlateAuditError",
    "__version__",
]
