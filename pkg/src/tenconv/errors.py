"""Exception types shared across the package."""


class TenconvError(Exception):
    """Base class for all tenconv errors."""


class ShapeMismatch(TenconvError):
    """Operands have incompatible shapes (message names the offending axes)."""


class RankError(TenconvError):
    """Contraction count is outside the legal range for the operand ranks."""


class EmptyInput(TenconvError):
    """An operation that needs at least one operand received none."""


class DivisionByZero(TenconvError):
    """Elementwise division hit a zero divisor."""


class OutOfBounds(TenconvError):
    """A window or index lies outside the tensor extents."""


class NotScalarLoss(TenconvError):
    """Backward was started from a node that is not rank 0."""


class BatchTooSmall(TenconvError):
    """Batch statistics requested on a single-sample batch in training mode."""


class BadGeometry(TenconvError):
    """Convolution geometry produces a non-positive output extent."""


class IncompatibleSpec(TenconvError):
    """Adjacent layer specs cannot be connected."""


class FormatError(TenconvError):
    """A serialized file is corrupt, truncated, or of the wrong kind."""


class LabelOutOfRange(TenconvError):
    """A class label lies outside [0, class_count)."""


class DataEmpty(TenconvError):
    """A dataset or split contains no samples."""


class ClassCountMismatch(TenconvError):
    """Two models disagree on the number of classes."""


class NumericError(TenconvError):
    """A non-finite value appeared during training or evaluation."""
