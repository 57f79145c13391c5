"""Exception types shared across the package."""


class HednetError(Exception):
    """Base class for all package-specific errors."""


class DuplicateCoordinate(HednetError):
    """A coordinate list contains the same coordinate twice."""


class InvalidKernel(HednetError):
    """Kernel geometry is invalid for the requested convolution mode."""


class CoordinateOverflow(HednetError):
    """Coordinate arithmetic would exceed the supported integer range."""


class ShapeError(HednetError):
    """Array shapes disagree with the declared geometry."""


class TopologyError(HednetError):
    """Coordinate sets that must coincide do not."""


class ProbeError(HednetError):
    """An influence probe referenced a coordinate that is not active."""


class ConfigError(HednetError):
    """A network configuration is internally inconsistent."""


class FormatError(HednetError):
    """An input file does not conform to its documented format."""
