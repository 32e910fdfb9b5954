"""Exception and warning types shared across the pipeline."""


class EarsrError(Exception):
    """Base class for all pipeline errors."""


class FormatError(EarsrError):
    """A slice file on disk does not match its declared layout.

    Carries the byte offset at which the file deviates from the expected
    size, so corrupt files can be located without a hex dump.
    """

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: {message} (byte offset {offset})")
        self.path = str(path)
        self.offset = offset


class MissingManifest(EarsrError):
    """Volume directory lacks a manifest or a required manifest key."""


class OutputTooLarge(EarsrError):
    """Resampling would produce an axis beyond the configured cap."""


class EmptyForeground(EarsrError):
    """No pixel reaches the ROI threshold; the slice is all background."""


class PatchTooLarge(EarsrError):
    """Requested patch size exceeds a slice dimension."""


class BadKernel(EarsrError):
    """Median filter kernel must be odd and at least 3."""


class GridMismatch(EarsrError):
    """Patch list does not line up with the grid origins."""


class BadConfig(EarsrError):
    """Invalid network or training configuration."""


class ShapeError(EarsrError):
    """Tensor spatial dimensions violate an operation's contract."""


class NonFiniteLoss(EarsrError):
    """A training loss became NaN or infinite; training diverged."""


class BadT(EarsrError):
    """Monte Carlo pass count must be at least 1."""


class ZeroMass(EarsrError):
    """Image has no intensity mass; moments are undefined."""


class EmptySet(EarsrError):
    """Set-to-set distance requires non-empty sets."""


class BadSpec(EarsrError):
    """Phantom specification is inconsistent."""


class SetMismatch(EarsrError):
    """Rating study image sets differ in length or alignment."""


class UnknownRater(EarsrError):
    """Rater is not enrolled in the study."""


class UnknownTrial(EarsrError):
    """Trial id does not exist or is not assigned to the rater."""


class OutOfRange(EarsrError):
    """Rating score falls outside the 1..6 scale."""


class NoData(EarsrError):
    """Analysis requested before any complete rating exists."""


class ConstantImageWarning(UserWarning):
    """Degenerate constant slice encountered; output flattened to zeros."""
