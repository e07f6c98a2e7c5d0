"""Exception types raised across the toolkit."""


class NeuronScopeError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatchError(NeuronScopeError, ValueError):
    pass


class CorruptContainerError(NeuronScopeError):
    """The weight file could not be parsed as a safetensors container."""


class MissingTensorError(NeuronScopeError, KeyError):
    pass


class EmptyTargetSetError(NeuronScopeError, ValueError):
    pass
