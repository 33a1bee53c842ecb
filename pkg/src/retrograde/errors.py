"""Exception hierarchy shared by all retrograde modules."""


class RetrogradeError(Exception):
    pass


# payload loading

class ImageError(RetrogradeError):
    pass


class BadMagic(ImageError):
    pass


class Unsupported(ImageError):
    pass


class Malformed(ImageError):
    pass


class OutOfRange(ImageError):
    pass


class StageFailed(RetrogradeError):
    pass


class ProtectFailed(RetrogradeError):
    pass


class UnsupportedPlatform(RetrogradeError):
    pass


# address maps

class DecodeError(RetrogradeError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} at offset {offset:#x}"
        super().__init__(message)
        self.offset = offset


class UnknownOpcode(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class MapFormatError(RetrogradeError):
    pass


class ParseError(MapFormatError):
    pass


class NonMonotonic(MapFormatError):
    pass


class EmptyMap(MapFormatError):
    pass


# debug sessions

class BackendError(RetrogradeError):
    pass


class SpawnFailed(BackendError):
    pass


class TraceRefused(BackendError):
    pass


class ChildLost(BackendError):
    pass


class NotStopped(BackendError):
    pass


class StepFailed(BackendError):
    pass


class BadAddress(BackendError):
    pass


class LoadFault(BackendError):
    pass


class EmuFault(BackendError):
    """Machine-level fault raised by the emulator core."""

    signal = 0

    def __init__(self, message, rip=None):
        super().__init__(message)
        self.rip = rip


class IllegalInstruction(EmuFault):
    signal = 4  # SIGILL


class MemFault(EmuFault):
    signal = 11  # SIGSEGV


# direction control

class DirectorError(RetrogradeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class MapMismatch(DirectorError):
    pass


class Exhausted(DirectorError):
    pass
