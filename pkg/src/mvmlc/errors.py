"""Exception types shared across the package."""


class DimensionMismatch(ValueError):
    """Operand or file shapes do not agree."""


# Optimizer-facing alias; same failure class.
ShapeMismatch = DimensionMismatch


class AllMaskedRow(ValueError):
    """A softmax row has no unmasked position to attend to."""


class NonScalarLoss(ValueError):
    """backward() was called on a tensor that is not a scalar."""


class DoubleBackward(RuntimeError):
    """backward() was called twice on the same tape."""


class MissingFile(FileNotFoundError):
    """A manifest or referenced data file does not exist."""


class NonBinary(ValueError):
    """A matrix required to be 0/1-valued contains other values."""


class EmptyRowMask(ValueError):
    """A sample has no available view."""


class InfeasibleRatio(ValueError):
    """The requested missing-view ratio cannot keep one view per sample."""


class DegenerateSplit(ValueError):
    """A train/test split would leave one side empty."""


class DegenerateMask(ValueError):
    """No known labels remain to average a masked loss over."""


class NonFiniteLoss(RuntimeError):
    """Training produced a NaN or infinite loss."""


class NoEvaluableSamples(ValueError):
    """Every sample is degenerate for the requested metric."""


class NoEvaluableLabels(ValueError):
    """Every label column is degenerate for the requested metric."""
