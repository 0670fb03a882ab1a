"""
Exception hierarchy for the tensor adapter toolkit.

Management commands map these onto stable exit codes (see
``tensor_adapters.cli``).
"""


class TensorAdapterError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(TensorAdapterError, ValueError):
    """Shape mismatch, rank out of range, unknown tag, and similar."""


class OracleLimitError(InvalidArgumentError):
    """The block-circulant oracle was asked to materialize too large a matrix."""


class DecompositionError(TensorAdapterError):
    """A per-slice SVD failed to converge."""

    def __init__(self, message, slice_index=None, tensor_name=None):
        self.slice_index = slice_index
        self.tensor_name = tensor_name
        prefix = f"{tensor_name}: " if tensor_name else ""
        super().__init__(f"{prefix}{message}")

    def with_tensor(self, tensor_name):
        return DecompositionError(
            str(self), slice_index=self.slice_index, tensor_name=tensor_name
        )


class NumericError(TensorAdapterError, ArithmeticError):
    """NaN or non-finite values reached a place that cannot accept them."""

    def __init__(self, message, layer=None):
        self.layer = layer
        prefix = f"layer {layer}: " if layer is not None else ""
        super().__init__(f"{prefix}{message}")


class UndefinedMetricError(TensorAdapterError):
    """The metric has no value for the given input (e.g. HD95 on an empty mask)."""


class ContainerError(TensorAdapterError, ValueError):
    """Malformed checkpoint container or schema violation."""


class ConfigError(TensorAdapterError, ValueError):
    """Experiment configuration could not be parsed or validated."""
