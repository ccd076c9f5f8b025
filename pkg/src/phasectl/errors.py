"""Exception types shared across the package."""


class PhasectlError(Exception):
    """Base class for all package errors."""


class PartNotFound(PhasectlError):
    pass


class ConfigInvalid(PhasectlError):
    pass


class FormatError(PhasectlError):
    pass


class SkeletonMismatch(PhasectlError):
    pass


class ModelNotReady(PhasectlError):
    pass


class TrainingDiverged(PhasectlError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class StepOutOfRange(PhasectlError):
    pass


class HookShapeError(PhasectlError):
    pass


class ShapeError(PhasectlError):
    pass


class MaskEmpty(PhasectlError):
    pass


class EditInvalid(PhasectlError):
    pass


class ReferenceDegenerate(PhasectlError):
    pass


class ChecksumMismatch(PhasectlError):
    pass
