"""Error categories shared across modules; the command line maps each to an exit code."""


class ConfigError(ValueError):
    """Bad or inconsistent configuration."""


class DataError(ValueError):
    """Malformed input records, templates or fixture files."""


class TransportError(RuntimeError):
    """A remote endpoint could not be reached; safe to retry."""
