class MoralkitError(Exception):
    """Base class for all library errors."""


class DegeneratePoint(MoralkitError, ValueError):
    """A point sits at (or numerically at) the sensor origin."""


class InvalidConfig(MoralkitError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class DegenerateInput(MoralkitError, ValueError):
    pass


class TooFewPoints(MoralkitError, ValueError):
    pass


class EmptyCoarseSet(MoralkitError, ValueError):
    pass


class EmptyDataset(MoralkitError, ValueError):
    pass


class InvalidAlpha(MoralkitError, ValueError):
    pass


class InvalidTau(MoralkitError, ValueError):
    pass


class ShapeMismatch(MoralkitError, ValueError):
    pass


class EmptyFeatures(MoralkitError, ValueError):
    pass


class LengthMismatch(MoralkitError, ValueError):
    pass


class FormatError(MoralkitError, ValueError):
    """A file on disk does not follow the expected layout or version."""


class VersionMismatch(FormatError):
    """A weight container written by an incompatible format version."""


class ParseError(FormatError):
    """A config file could not be parsed; the message carries line/field details."""


class DegenerateLabels(UserWarning):
    """Training labels contain a single class; recall for the other is undefined."""


class NoGroundFound(UserWarning):
    """RANSAC found no plane with enough support; the cloud was returned unchanged."""
