"""Exception types raised across the toolchain.

Every model-file problem carries the index of the offending layer when one
can be named, so CLI output and tests can point at the exact entry.
"""


class PhasesnnError(Exception):
    """Base class for all toolchain errors."""

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class ManifestError(PhasesnnError):
    """model.json (or snn.json) is malformed or violates an invariant."""


class BlobLayoutError(PhasesnnError):
    """A blob offset/length/shape does not match the manifest."""


class NonFiniteWeightError(PhasesnnError):
    """A loaded parameter array contains NaN or infinity."""


class UnsupportedLayerError(PhasesnnError):
    """Layer kind unknown, or not convertible in its current position."""


class ShapeMismatchError(PhasesnnError):
    """Tensor shapes are inconsistent (bad input, bad geometry, bad graph)."""


class CalibrationError(PhasesnnError):
    """Calibration statistics are missing, empty, or unusable."""


class ConversionError(PhasesnnError):
    """The network cannot be turned into a spiking model as configured."""
