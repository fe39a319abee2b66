class EvkdError(ValueError):
    """Base class for every error raised by evkd."""


class MalformedRecord(EvkdError):
    pass


class OutOfRange(EvkdError):
    pass


class EmptyStream(EvkdError):
    pass


class NonDivisible(EvkdError):
    pass


class DegenerateBox(EvkdError):
    pass


class NonMultiple(EvkdError):
    pass


class ShapeMismatch(EvkdError):
    pass


class BadSigma(EvkdError):
    pass


class BadTemperature(EvkdError):
    pass


class LengthMismatch(EvkdError):
    pass


class EmptyWindow(EvkdError):
    pass


class VideoTooShort(EvkdError):
    pass


class EmptyRun(EvkdError):
    pass


class AllAbsent(EvkdError):
    pass


class MissingSplitFile(EvkdError):
    pass


class DuplicateVideoId(EvkdError):
    pass


class MalformedLine(EvkdError):
    pass


class InvalidBox(EvkdError):
    pass
