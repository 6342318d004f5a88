"""Shared exception and warning types."""


class DegenerateInput(ValueError):
    """Input is too close to a degenerate configuration to process."""


class InsufficientData(ValueError):
    """Not enough samples for the requested operation."""


class LengthMismatch(ValueError):
    """Paired sequences have different lengths."""


class ShapeMismatch(ValueError):
    """Array arguments have incompatible shapes."""


class BindMismatch(ValueError):
    """Pose does not match the skeleton a mesh was bound to."""


class GraphCycle(ValueError):
    """A tape node refers to a node that is not an ancestor."""


class ClampWarning(RuntimeWarning):
    """A probability was clamped to avoid a non-finite loss."""
