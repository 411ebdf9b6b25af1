# backend/utils/errors.py
"""Domain exceptions. Bad inputs subclass ValueError, runtime failures RuntimeError."""


class ZFSError(Exception):
    """Base class for toolkit errors."""


# ==========================================
# INPUT ERRORS
# ==========================================

class ConfigError(ZFSError, ValueError):
    pass

class DatasetFormatError(ZFSError, ValueError):
    pass

class MissingSplitFileError(DatasetFormatError):
    pass

class ZeroAttributeRowError(DatasetFormatError):
    def __init__(self, row: int):
        super().__init__(f"Attribute row {row} is all zeros and cannot be normalized")
        self.row = row

class UnknownClassError(DatasetFormatError):
    pass

class MissingAttributeError(ZFSError, ValueError):
    pass

class GeometryMismatchError(ZFSError, ValueError):
    pass

class InvalidSpecError(ZFSError, ValueError):
    pass

class InputShapeError(ZFSError, ValueError):
    pass

class LabelOutOfRangeError(ZFSError, ValueError):
    pass

class EmptyBatchError(ZFSError, ValueError):
    pass

class DegenerateTaskError(ZFSError, ValueError):
    pass

class InfeasibleSyntheticSpecError(ZFSError, ValueError):
    pass

class DegenerateSeriesError(ZFSError, ValueError):
    pass

class TapUnavailableError(ZFSError, ValueError):
    pass


# ==========================================
# RUNTIME ERRORS
# ==========================================

class NonFiniteLossError(ZFSError, RuntimeError):
    pass

class MIDivergenceError(ZFSError, RuntimeError):
    pass

class ZFSViolationError(ZFSError, RuntimeError):
    """Raised when a parameter could carry information from outside the train split."""
