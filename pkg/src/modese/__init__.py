"""Single-microphone speech enhancement with a mixture of deep experts."""

__version__ = "0.1.0"

from modese.errors import ConfigError, DataError, FormatError, ModeseError

__all__ = ["ConfigError", "DataError", "FormatError", "ModeseError", "__version__"]
