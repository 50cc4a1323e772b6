"""Exception hierarchy shared by all pipeline modules."""


class MemecapError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(MemecapError):
    """Input data violates a documented invariant (bad enum, bad range, bad shape)."""


class SegmentationError(MemecapError):
    """Sub-image segmentation produced an unusable panel."""


class DependencyError(MemecapError):
    """A pipeline stage was invoked before the stage that produces its inputs."""


class DivergenceError(MemecapError):
    """RL training exceeded the configured KL ceiling."""
