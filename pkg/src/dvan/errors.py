"""Exception types raised across the package."""


class DvanError(Exception):
    """Base class for every error raised by dvan."""


class DimensionError(DvanError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DvanError, ValueError):
    """A documented precondition was violated (e.g. an unnormalized map)."""


class InputError(DvanError, ValueError):
    """Bad user-facing input: empty sequences, out-of-range labels, ..."""


class PlanError(DvanError, ValueError):
    """A canvas plan cannot be applied to an image."""


class SpecError(DvanError, ValueError):
    """An invalid synthetic task description."""


class ConfigError(DvanError, ValueError):
    """Run configuration failed validation."""


class ParseError(DvanError, ValueError):
    """Malformed binary input.

    ``offset`` is the byte position where parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class NumericalError(DvanError, FloatingPointError):
    """A non-finite value appeared while debug checking was on."""
