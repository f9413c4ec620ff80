class HfgnnError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(HfgnnError):
    """Invalid configuration value or combination.

    ``key`` and ``line`` locate the offending entry when it came from a
    config file.
    """

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.message = message
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key {key}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class SplitError(HfgnnError):
    pass


class SequenceLengthError(HfgnnError):
    pass


class ShapeError(HfgnnError):
    pass


class TrainingError(HfgnnError):
    pass


class ProtocolError(HfgnnError):
    pass
