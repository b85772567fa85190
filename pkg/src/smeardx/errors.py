"""Exception types shared across the toolkit."""


class SmearError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(SmearError):
    """An input violates a documented invariant or precondition."""


class AnnotationParseError(ValidationError):
    """An annotation file entry is malformed; the message names the entry and field."""


class ConfigurationError(SmearError):
    """Unusable configuration: unknown key, unknown backend, missing weights."""


class CapacityError(SmearError):
    """A bounded retry budget was exhausted."""
