"""Exception hierarchy. CLI exit codes are attached to the top-level groups."""


class PsbError(Exception):
    exit_code = 1


class InvalidInput(PsbError, ValueError):
    exit_code = 2


class ConfigError(PsbError, ValueError):
    exit_code = 2


class DataError(PsbError):
    exit_code = 3


class ModelError(PsbError):
    exit_code = 4


class UnfoldableGraph(ModelError):
    pass


class ShapeMismatch(ModelError, ValueError):
    pass


class VersionMismatch(ModelError):
    pass


class TruncatedBlob(ModelError):
    pass
