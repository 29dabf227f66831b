"""Exception hierarchy shared across the package."""


class PoirotError(Exception):
    """Base class; ``category`` is the short tag printed by the CLI."""

    category = "error"


class ShapeError(PoirotError, ValueError):
    category = "shape"


class SizeError(PoirotError, ValueError):
    category = "size"


class EmptyError(PoirotError, ValueError):
    category = "empty"


class ConfigError(PoirotError, ValueError):
    category = "config"


class ParseError(PoirotError, ValueError):
    category = "parse"

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class StateError(PoirotError, RuntimeError):
    category = "state"


class UnrepresentablePointError(PoirotError, ValueError):
    category = "unrepresentable"


class TrainingError(PoirotError, RuntimeError):
    category = "numeric"
