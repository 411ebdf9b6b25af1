# backend/utils/__init__.py
"""
Export all utility modules
"""
from .errors import ZFSError, ConfigError, ZFSViolationError
from .helpers import (
    seed_everything,
    canonical_json,
    fingerprint,
    generate_run_id,
    log_mean_exp,
    to_numpy,
)
from .run_logger import RunLogger, read_loss_curve
from .statistics import Correlation, correlation
from .validation import (
    validate_split,
    validate_attribute_matrix,
    validate_manifest_counts,
)

__all__ = [
    # Errors
    "ZFSError",
    "ConfigError",
    "ZFSViolationError",

    # Helpers
    "seed_everything",
    "canonical_json",
    "fingerprint",
    "generate_run_id",
    "log_mean_exp",
    "to_numpy",

    # Run logging
    "RunLogger",
    "read_loss_curve",

    # Statistics
    "Correlation",
    "correlation",

    # Validation
    "validate_split",
    "validate_attribute_matrix",
    "validate_manifest_counts",
]
