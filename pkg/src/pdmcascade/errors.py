"""Exception types raised across the package."""


class PdmCascadeError(Exception):
    """Base class for all package-specific errors."""


class DegenerateShape(PdmCascadeError):
    """A shape has zero variance (all points coincide), so no similarity fit exists."""


class InsufficientData(PdmCascadeError):
    """Too few samples to train the requested model."""


class RankDeficient(PdmCascadeError):
    """Training data carries no variance along any mode."""


class DimensionMismatch(PdmCascadeError):
    """An input vector or matrix has the wrong length for the model."""


class SingularHessian(PdmCascadeError):
    """The Gauss-Newton Hessian is not invertible within the conditioning threshold."""


class SingularSystem(PdmCascadeError):
    """Unregularized least squares on a rank-deficient Gram matrix."""


class InvalidBBox(PdmCascadeError):
    """Bounding box with non-positive width or height."""


class ParseError(PdmCascadeError):
    """Malformed landmark annotation text.

    Attributes:
        line: 1-based line number where parsing failed.
    """

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyDataset(PdmCascadeError):
    """No usable (image, annotation) pairs were found."""


class FormatError(PdmCascadeError):
    """Corrupt or unsupported model file.

    Attributes:
        offset: byte offset in the stream where the problem was detected.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ZeroIOD(PdmCascadeError):
    """The two inter-ocular reference landmarks coincide."""


class EmptyErrors(PdmCascadeError):
    """A cumulative error distribution was requested for an empty error list."""
