"""Exception hierarchy.

Validation errors signal bad inputs or configuration (CLI exit code 1);
runtime failures signal broken state encountered mid-pipeline (exit code 2).
"""


class VcflowError(Exception):
    pass


class ValidationError(VcflowError):
    pass


class RuntimeFailure(VcflowError):
    pass


class ConfigError(ValidationError):
    pass


class PipelineError(RuntimeFailure):
    pass


# preprocessing
class UnknownScheme(ValidationError):
    pass


class MissingLabel(ValidationError):
    pass


class OverlappingIndices(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


class NonIntegerShift(ValidationError):
    pass


class ShiftExceedsRun(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class EmptyList(ValidationError):
    pass


class DuplicateTarget(ValidationError):
    pass


class TargetOutOfGrid(ValidationError):
    pass


# alignment / losses
class BadPermIndex(ValidationError):
    pass


class ZeroNormRow(ValidationError):
    pass


class SingleSubject(ValidationError):
    pass


class LabelOutOfRange(ValidationError):
    pass


class TokenOutOfVocab(ValidationError):
    pass


class NonBinaryMask(ValidationError):
    pass


class NegativeWeight(ValidationError):
    pass


class BadBatchIndex(ValidationError):
    pass


class UntrainedHeads(ValidationError):
    pass


# metrics
class NWayExceedsClasses(ValidationError):
    pass


class SingleFrame(ValidationError):
    pass


class PairingMismatch(ValidationError):
    pass


# datasets / IO
class BadRatios(ValidationError):
    pass


class NonFiniteArray(ValidationError):
    pass


class IOFailure(RuntimeFailure):
    pass


class BadMagic(RuntimeFailure):
    pass


class UnsupportedVersion(RuntimeFailure):
    pass


class CorruptHeader(RuntimeFailure):
    pass


class UnsupportedDtype(ValidationError):
    pass


# trainer
class MissingUpstreamCheckpoint(ValidationError):
    pass


class DivergedLoss(RuntimeFailure):
    pass
