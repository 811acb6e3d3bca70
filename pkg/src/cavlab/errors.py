"""Exception hierarchy shared across the package."""


class CavlabError(Exception):
    """Base class for every error raised by cavlab."""


class ShapeError(CavlabError, ValueError):
    pass


class GradientError(CavlabError, RuntimeError):
    pass


class FormatError(CavlabError, ValueError):
    """A file or byte stream does not follow the expected layout."""


class UnsupportedVersionError(FormatError):
    pass


class TrainingDivergedError(CavlabError, ArithmeticError):
    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class InseparableError(CavlabError, ValueError):
    """Probe inputs carry no signal a linear classifier could use."""


class SignificanceAbortError(CavlabError, RuntimeError):
    def __init__(self, message, failures=()):
        super().__init__(message)
        self.failures = list(failures)
