"""Exception hierarchy shared by every stage of the package."""


class FatlError(Exception):
    """Base class for all errors raised by :mod:`fatl`."""


class RegistryError(FatlError, ValueError):
    pass


class EmptyRegistry(RegistryError):
    pass


class DuplicateFeature(RegistryError):
    pass


class InvalidDescriptor(RegistryError):
    pass


class UnknownFeature(RegistryError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class AmbiguousMapping(RegistryError):
    pass


class DegenerateFeature(FatlError, ValueError):
    pass


class SchemaError(FatlError, ValueError):
    """A file or mapping does not match the expected schema.

    ``path`` is the dotted field path of the offending entry.
    """

    def __init__(self, path, message=None):
        self.path = path
        super().__init__(path if message is None else f"{path}: {message}")


class VersionMismatch(SchemaError):
    pass


class AlignmentError(FatlError, ValueError):
    def __init__(self, feature_id):
        self.feature_id = feature_id
        super().__init__(feature_id)


class PolicyError(FatlError, ValueError):
    pass


class DimensionError(FatlError, ValueError):
    pass


class TrainError(FatlError, ValueError):
    pass


class DivergenceError(TrainError):
    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}")


class MetricError(FatlError, ValueError):
    pass


class CohortError(FatlError, ValueError):
    pass


class StageError(FatlError):
    """A pipeline stage failed; carries the stage name and offending path."""

    def __init__(self, stage, message, path=None):
        self.stage = stage
        self.path = path
        where = f" [{path}]" if path is not None else ""
        super().__init__(f"stage '{stage}' failed{where}: {message}")


class ConfigError(FatlError, ValueError):
    pass
