"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class DegenerateRowError(ValueError):
    """A softmax row has no finite entry."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (non-scalar loss, repeated backward)."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class OptimizerError(RuntimeError):
    """The optimizer received unusable gradients."""


class TrainingError(RuntimeError):
    """Training diverged or was misconfigured."""


class ModelError(RuntimeError):
    """A model is unusable (non-finite parameters, wrong shapes)."""


class ModeError(ValueError):
    """An operation was requested for a corpus mode that does not support it."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown key."""


class CheckpointError(ValueError):
    """A checkpoint is corrupt or incompatible with the requested model."""


class CorpusLoadError(ValueError):
    """A corpus directory could not be read."""
