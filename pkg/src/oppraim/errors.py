"""Exception hierarchy shared by all oppraim modules."""


class OppraimError(Exception):
    """Base class for every error raised by this package."""


class InvalidCoordinate(OppraimError, ValueError):
    pass


class MalformedTrace(OppraimError, ValueError):
    """A trace or anchor file violates the format or a field invariant."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class NonMonotonicTimestamps(MalformedTrace):
    pass


class EmptyMasterStream(OppraimError, ValueError):
    pass


class ConfigInvalid(OppraimError, ValueError):
    pass


class InsufficientSatellites(OppraimError, ValueError):
    pass


class ScheduleOutOfRange(OppraimError, ValueError):
    pass


class InsufficientAnchors(OppraimError, ValueError):
    pass


class SingularGeometry(OppraimError, ValueError):
    pass


class NoConvergence(OppraimError, RuntimeError):
    pass


class DegenerateFit(OppraimError, ValueError):
    pass


class NoGeoipData(OppraimError, ValueError):
    pass


class InsufficientHistory(OppraimError, ValueError):
    pass


class NoEstimates(OppraimError, ValueError):
    pass


class InsufficientSamples(OppraimError, ValueError):
    pass


class NoGroundTruth(OppraimError, ValueError):
    pass


class LengthMismatch(OppraimError, ValueError):
    pass


class EmptyGrid(OppraimError, ValueError):
    pass


class MissingInput(OppraimError, ValueError):
    pass
