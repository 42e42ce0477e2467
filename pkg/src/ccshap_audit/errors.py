"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes, so every public failure path raises one
of the classes below (or a subclass).
"""


class CcShapError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CcShapError, ValueError):
    """Invalid configuration value or template."""


class TemplateError(ConfigError):
    pass


class ContractError(CcShapError, ValueError):
    """A caller violated an operation's precondition (shape, length, range)."""


class DataError(CcShapError):
    """Problem with input data: unreadable files, insufficient records."""


class IngestionError(DataError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


class InsufficientDataError(DataError):
    def __init__(self, label, available, requested):
        super().__init__(
            f"class {label} has {available} records, {requested} requested"
        )
        self.label = label
        self.available = available
        self.requested = requested


class TrainingError(CcShapError):
    pass


class ExactLimitError(ContractError):
    """Raised when exhaustive enumeration would exceed the configured limit."""


class BackendError(CcShapError):
    """A scoring backend failed."""


class TransportError(BackendError):
    """Network-level failure after all retries were used up."""


class ProtocolError(BackendError):
    """The server answered, but not in the agreed wire format."""


class CoalitionError(BackendError):
    """Scorer failure during attribution; carries the coalition masks involved."""

    def __init__(self, message, masks=None):
        super().__init__(message)
        self.masks = masks


class VerificationError(CcShapError):
    pass
