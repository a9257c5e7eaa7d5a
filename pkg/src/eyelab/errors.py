"""Exception hierarchy shared by every module.

Three bases mirror the process exit codes of the command-line surface:
configuration problems exit 2, data problems exit 3, numerical failures
exit 4. Anything a pipeline raises deliberately derives from one of them.
"""

from __future__ import annotations


class EyelabError(Exception):
    """Base class for package-specific failures."""


class ConfigError(EyelabError):
    """Invalid configuration, spec, or argument combination (exit code 2)."""


class DataError(EyelabError):
    """Invalid, missing, or inconsistent data (exit code 3)."""


class NumericalError(EyelabError):
    """Numerical blow-up: NaN/inf where finite values are required (exit code 4)."""


# --- data model -------------------------------------------------------------

class MissingFile(DataError):
    pass


class SchemaViolation(DataError):
    def __init__(self, line: int | None, field: str, message: str = ""):
        self.line = line
        self.field = field
        detail = f"line {line}, field '{field}'" if line is not None else f"field '{field}'"
        super().__init__(f"schema violation at {detail}" + (f": {message}" if message else ""))


class UnknownModality(DataError):
    def __init__(self, value: str, line: int | None = None):
        self.value = value
        self.line = line
        at = f" at line {line}" if line is not None else ""
        super().__init__(f"unknown modality {value!r}{at}")


class DanglingPath(DataError):
    def __init__(self, record_id: str, path: str):
        self.record_id = record_id
        self.path = path
        super().__init__(f"record {record_id!r} references missing path {path!r}")


class UnwritableOutputDir(DataError):
    pass


class UnwritablePath(DataError):
    pass


class InvalidSpec(ConfigError):
    pass


class DegenerateSplit(DataError):
    pass


# --- encoder ----------------------------------------------------------------

class IndivisibleImage(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class NonFiniteActivation(NumericalError):
    pass


class LayerOutOfRange(ConfigError):
    pass


# --- pretraining ------------------------------------------------------------

class CropLargerThanImage(ConfigError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class EmptyManifest(DataError):
    pass


class MixedModalities(DataError):
    pass


class DivergedLoss(NumericalError):
    pass


# --- decoders ---------------------------------------------------------------

class DimMismatch(DataError):
    pass


class NonPositiveInterval(DataError):
    pass


# --- adaptation -------------------------------------------------------------

class CacheCorruption(DataError):
    pass


class SingleClassTrainSet(DataError):
    pass


class InsufficientExamples(DataError):
    def __init__(self, class_index: int, have: int, need: int):
        self.class_index = class_index
        self.have = have
        self.need = need
        super().__init__(f"class {class_index} has {have} examples, need {need}")


# --- metrics ----------------------------------------------------------------

class SingleClass(DataError):
    pass


class NoPositives(DataError):
    pass


class TooFewSamples(DataError):
    pass


class PanelMismatch(DataError):
    pass


class CountMismatch(DataError):
    pass


class OutOfRangeClass(DataError):
    pass


class EmptyResponses(DataError):
    pass


# --- synthetic --------------------------------------------------------------

class TooFewImages(DataError):
    pass


class InsufficientSynthetic(DataError):
    pass


# --- explain ----------------------------------------------------------------

class UnorderedCheckpoints(DataError):
    pass
