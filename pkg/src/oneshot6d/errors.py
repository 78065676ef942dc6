"""Exception types shared across the package."""


class OneShot6DError(Exception):
    """Base class for all package errors."""


class NonPositiveDepth(OneShot6DError):
    """A point landed behind (or on) the camera plane."""


class EmptyMask(OneShot6DError):
    """An operation required at least one masked pixel."""


class MaskTooSmall(OneShot6DError):
    """Fewer in-mask pixels than requested samples (recoverable)."""


class NoEligiblePositive(OneShot6DError):
    """No viewpoint falls inside the positive angular band."""


class ShapeMismatch(OneShot6DError):
    """Tensor/array shapes incompatible with the requested operation."""


class NotScalar(OneShot6DError):
    """backward() requires a scalar loss."""


class EmptyCloud(OneShot6DError):
    """Pruning would leave no object keypoints."""


class NoGroundTruthPairs(OneShot6DError):
    """Coarse loss needs at least one ground-truth pair."""


class TooFewCorrespondences(OneShot6DError):
    """PnP needs at least 6 correspondences."""


class DegenerateConfiguration(OneShot6DError):
    """All RANSAC minimal sets were degenerate."""


class NoMatches(OneShot6DError):
    """Refinement requires at least one match."""


class NonPositiveZoom(OneShot6DError):
    """Zoom factors must be strictly positive."""
