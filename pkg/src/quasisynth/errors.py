"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value or hyperparameter is invalid."""


class InvalidInputError(ValueError):
    """An input tensor, image or mask violates its contract."""


class ShapeError(InvalidInputError):
    """Inputs have incompatible shapes or layer layouts."""


class ContractError(RuntimeError):
    """An operation was called on a handle in the wrong state (e.g. not frozen)."""


class MissingCheckpointError(FileNotFoundError):
    """A required checkpoint is absent; the message names the command that creates it."""


class SynthesisDiverged(RuntimeError):
    """The synthesis objective became non-finite."""

    def __init__(self, message, terms=None):
        super().__init__(message)
        self.terms = dict(terms or {})
