"""Exception hierarchy shared by all starnet modules."""


class StarNetError(Exception):
    """Base class for every error raised by starnet."""


class ShapeMismatch(StarNetError, ValueError):
    pass


class RankDeficient(StarNetError, ArithmeticError):
    pass


class InsufficientData(StarNetError, ValueError):
    pass


class NonInvertibleActivation(StarNetError, ValueError):
    pass


class DeterminednessViolation(StarNetError, ValueError):
    pass


class ArchitectureError(StarNetError, ValueError):
    """Raised when training is requested on an architecture with violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        msg = "; ".join(str(v) for v in self.violations)
        super().__init__(msg or "invalid architecture")


class FormatError(StarNetError, ValueError):
    """Base for malformed files."""


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class ConfigError(StarNetError, ValueError):
    pass
