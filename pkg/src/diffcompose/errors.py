"""Exception hierarchy shared across the package.

Every error raised by this package derives from ComposeError so callers
(CLI, service) can map failures to exit codes / HTTP statuses in one place.
"""


class ComposeError(Exception):
    """Base class for all errors raised by diffcompose."""


class ShapeError(ComposeError):
    """An array argument has an incompatible shape or dtype."""


class RangeError(ComposeError):
    """A scalar argument lies outside its legal range."""


class ConfigurationError(ComposeError):
    """A config file, flag set, or prompt registration is invalid."""


class CapabilityError(ComposeError):
    """A backend was asked for an operation it does not support."""


class EmptyContextError(ComposeError):
    """Attention-context exclusion would discard every key/value token."""


class EmptyMaskError(ComposeError):
    """A mask that must select at least one pixel selects none."""


class AbsentEntryError(ComposeError):
    """A key/value cache lookup found no recorded entry."""


class DuplicateEntryError(ComposeError):
    """A key/value cache slot was written twice without a clear()."""


class AssetError(ComposeError):
    """An artifact file could not be read or written."""


class NonFiniteGradientError(ComposeError):
    """The optimization loop produced a NaN or infinite gradient."""

    def __init__(self, message: str, log=None):
        super().__init__(message)
        self.log = log
