class InvalidInputError(ValueError):
    """Input tensors or arrays violate a shape, range or finiteness contract."""


class ConfigError(ValueError):
    """An experiment configuration or hyperparameter is invalid."""


class FormatError(ValueError):
    """A dataset or checkpoint file does not have the expected layout."""


class TrainingAborted(RuntimeError):
    """A training update produced a non-finite or diverging loss."""

    def __init__(self, component, value):
        self.component = component
        self.value = value
        super().__init__(f"training aborted: loss of {component!r} is {value!r}")
