"""Exception classes shared across the package.

The CLI prints ``error=<ClassName>`` lines, so anything user-facing should
raise one of these (or a ValueError for plain argument misuse).
"""


class StemcodecError(Exception):
    """Base class for package-specific failures."""


class AudioFormatError(StemcodecError):
    """Malformed or unsupported audio file."""


class DatasetError(StemcodecError):
    """Missing stems, bad track layout, or unusable dataset."""


class ConfigError(StemcodecError):
    """Invalid or inconsistent configuration."""


class CheckpointError(StemcodecError):
    """Unreadable checkpoint or config mismatch on load."""


class DivergenceError(StemcodecError):
    """Training loss became non-finite."""
