"""Exception hierarchy shared by the library and the CLI."""


class ModeseError(Exception):
    """Base class for all library errors."""


class ConfigError(ModeseError, ValueError):
    """Invalid or inconsistent configuration (including config-hash mismatch)."""


class DataError(ModeseError, ValueError):
    """Bad input data: empty/silent signals, corrupt corpora, shape mismatches."""


class FormatError(ModeseError):
    """A serialized artifact is corrupt, truncated or of the wrong kind/version."""
