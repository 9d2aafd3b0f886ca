"""Exception types shared across the package.

Everything raised on bad data or bad arguments derives from MaskbenchError,
so the CLI can map it to the "data error" exit code in one place.  I/O
failures stay plain OSError.
"""


class MaskbenchError(Exception):
    """Base class for all data / argument errors raised by this package."""


class FormatError(MaskbenchError):
    """Malformed input file (carries the offending line number in the message)."""


class DuplicateIdError(MaskbenchError):
    """A manifest contains the same image_id twice."""


class DuplicateKeyError(MaskbenchError):
    """A prediction file contains the same (model, image_id, condition) twice."""


class RangeError(MaskbenchError):
    """A numeric argument is outside its documented range."""


class DimensionMismatch(MaskbenchError):
    """Two images that must share dimensions do not."""


class DegenerateInput(MaskbenchError):
    """Input is technically valid but the operation is undefined on it."""


class TooSmall(MaskbenchError):
    """Image is smaller than the metric's minimum window size."""


class WeightError(MaskbenchError):
    """Quality weights are negative or do not sum to one."""


class KeyMissing(MaskbenchError):
    """A required (image_id, condition) key is absent from a sidecar file."""


class MissingTruth(MaskbenchError):
    """A prediction references an image_id with no ground-truth label."""


class MissingField(MaskbenchError):
    """A record lacks a field required by the requested statistic."""


class MonotonicityError(MaskbenchError):
    """Top-k scores are not in descending order."""


class EmptyIntersection(MaskbenchError):
    """No common images between two record sets; never silently zero."""


class Underdetermined(MaskbenchError):
    """Not enough distinct points to fit the requested model."""


class EmptySelection(MaskbenchError):
    """No grid combination survived the selection step."""


class EmptySample(MaskbenchError):
    """A grid combination sampled zero images."""


class ProviderError(MaskbenchError):
    """A prediction provider failed to deliver records for a condition."""
