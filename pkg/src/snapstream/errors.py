"""Exception taxonomy shared by every module.

The CLI maps these onto exit codes, so keep the hierarchy shallow.
"""


class SnapStreamError(Exception):
    """Base class for all package errors."""


class ConfigError(SnapStreamError, ValueError):
    """A configuration violates a documented invariant."""


class ContractViolation(SnapStreamError, ValueError):
    """An operation was called outside its precondition."""


class CapacityError(ContractViolation):
    """A sequence does not fit the static cache capacity."""


class GenerationCapacityExhausted(SnapStreamError):
    """Raised when decoding would write past ``l_max``.

    This is a stop signal rather than a failure: static-graph serving halts
    generation once the padded sequence is full.
    """


class SnapshotFormatError(SnapStreamError, ValueError):
    """A cache snapshot is malformed or has an unsupported version."""
