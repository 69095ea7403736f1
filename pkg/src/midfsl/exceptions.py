"""Exception types shared across the midfsl package."""


class MidFslError(Exception):
    """Base class for all midfsl errors."""


class ZeroVector(MidFslError):
    """A vector required to be nonzero has (numerically) zero norm."""


class IndivisibleSplit(MidFslError):
    """Feature dimension is not divisible by the requested split count."""


class InsufficientPrototypes(MidFslError):
    """Fewer candidate prototypes than the requested neighbor count."""


class DegenerateAngle(MidFslError):
    """Cosine between feature and reconstruction is below the prolonging floor."""


class ShapeMismatch(MidFslError):
    """Input tensor shape does not match the configured model."""


class UnknownLabel(MidFslError):
    """Class label not present in the prototype bank."""


class EmptyDataset(MidFslError):
    """Dataset has no classes or no samples."""


class EmptyClass(MidFslError):
    """A class has no support features to average."""


class NonFiniteLoss(MidFslError):
    """A loss term became NaN or infinite during training."""


class VersionMismatch(MidFslError):
    """Checkpoint format version differs from the one this code writes."""


class CorruptArchive(MidFslError):
    """Checkpoint file is unreadable or structurally invalid."""


class InsufficientData(MidFslError):
    """Not enough samples or classes for the requested operation."""


class MissingSplitFile(MidFslError):
    """Dataset root does not contain a split.tsv manifest."""


class OverlappingSplits(MidFslError):
    """A class is assigned to more than one split."""


class MissingSample(MidFslError):
    """A class listed in the manifest has no image files on disk."""


class IoFailure(MidFslError):
    """Filesystem operation failed while writing generated data or plots."""


class ConfigError(MidFslError):
    """Run configuration is malformed (unknown key, bad value, missing file)."""
