"""Exception types shared across the package."""


class TMAError(Exception):
    """Base class for every error raised by tmanet."""


class ShapeError(TMAError, ValueError):
    """Tensor extents do not satisfy an operation's requirements."""


class ContractError(TMAError, ValueError):
    """A precondition on arguments (other than shapes) was violated."""


class EmptyLossError(TMAError, ValueError):
    """Every pixel of a loss was ignored, so the mean is undefined."""


class SamplingError(TMAError, ValueError):
    """Not enough past frames to draw the requested memory."""


class FormatError(TMAError, ValueError):
    """A binary file does not follow its declared layout."""
