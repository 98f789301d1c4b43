"""Error classes with stable machine-readable codes (used by the CLI)."""
from __future__ import annotations


class SpecflowError(Exception):
    code = "SPECFLOW_ERROR"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class ConfigParseError(SpecflowError):
    code = "CONFIG_INVALID"


class FormatVersionError(SpecflowError):
    code = "VERSION_MISMATCH"


class BasisMismatchError(SpecflowError):
    code = "BASIS_MISMATCH"


class CheckpointCorruptError(SpecflowError):
    code = "CKPT_CORRUPT"


class BasisCorruptError(SpecflowError):
    code = "BASIS_CORRUPT"


class DatasetCorruptError(SpecflowError):
    code = "DS_CORRUPT"


class DatasetCountError(SpecflowError):
    code = "DS_COUNT_MISMATCH"


class NonFiniteStateError(SpecflowError, FloatingPointError):
    code = "NONFINITE_STATE"

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class UnitScaleError(SpecflowError, ValueError):
    code = "UNIT_SCALE"
