"""
Definitions of exceptions
"""

from __future__ import annotations

from typing import Any, Optional


class HaloMDError(Exception):
    """Base class of every error raised by the package"""


class DecodeError(HaloMDError):
    """The bytes are somehow invalid"""


class ModelFormatError(DecodeError):
    """A model file has an unsupported version or inconsistent shapes"""


class ParseError(HaloMDError):
    """A text file (extended XYZ, CSV) could not be parsed"""

    def __init__(self, message: str, lineno: Optional[int] = None) -> None:
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class SingularityError(HaloMDError, ArithmeticError):
    """Two atoms overlap, or a distance of zero reached a 1/r term"""


class MinimumImageError(HaloMDError, ValueError):
    """A cutoff is larger than half of a periodic box length"""


class CapacityError(HaloMDError):
    """An atom has more neighbors than the model's environment can hold"""


class PartitionError(HaloMDError):
    """Local atom sets do not partition the NN atoms"""


class GeometryError(HaloMDError, ValueError):
    """A rank grid or halo does not fit the simulation box"""


class TraceError(HaloMDError, ValueError):
    """A timing span is malformed"""


class ConfigError(HaloMDError, ValueError):
    """A run configuration is invalid"""


class ScalingFitError(HaloMDError, ValueError):
    """Too few distinct points to fit the throughput model"""


class SimulationError(HaloMDError):
    """The MD loop produced non-finite forces"""

    def __init__(self, step: int, provider: str, message: str = "non-finite forces") -> None:
        self.step = step
        self.provider = provider
        super().__init__(f"step {step}: {message} from provider {provider!r}")


class TrainingDivergedError(HaloMDError):
    """The training loss stopped being finite"""

    def __init__(self, epoch: int, checkpoint: Any, curve: Any) -> None:
        self.epoch = epoch
        # last model whose loss was finite
        self.checkpoint = checkpoint
        self.curve = curve
        super().__init__(f"training diverged at epoch {epoch}")
