"""Exception hierarchy shared by every clusdiff module."""


class ClusDiffError(Exception):
    """Base class for all errors raised by clusdiff."""


class ShapeError(ClusDiffError, ValueError):
    pass


class ConfigError(ClusDiffError, ValueError):
    pass


class NumericError(ClusDiffError, ArithmeticError):
    pass


class StateError(ClusDiffError, KeyError):
    pass


class DataError(ClusDiffError, ValueError):
    pass


class VocabularyError(ClusDiffError, KeyError):
    pass


class RangeError(ClusDiffError, IndexError):
    pass


class MissingArtifactError(ClusDiffError, FileNotFoundError):
    """An upstream pipeline artifact is absent."""

    def __init__(self, path):
        super().__init__(f"missing upstream artifact: {path}")
        self.path = path
