"""Exception hierarchy shared across the toolkit.

ConfigError maps to CLI exit code 2, numerical failures (Diverged,
SolveFailed) to exit code 3; everything else is a programming/contract
error surfaced to the caller.
"""


class DiffregError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DiffregError):
    """Invalid configuration: bad paths, out-of-range values, missing keys."""


class NotARotation(DiffregError):
    """Matrix failed the orthogonality / determinant check."""


class NotUnit(DiffregError):
    """Vector expected on the unit sphere is not unit norm."""


class ShapeMismatch(DiffregError):
    """Array shapes incompatible with the declared operation."""


class BadFocal(DiffregError):
    """Source-to-detector distance must be positive."""


class BadEnergy(DiffregError):
    """Beam energy I0 must be positive."""


class DegenerateRay(DiffregError):
    """Ray endpoints coincide."""


class SolveFailed(DiffregError):
    """Damped normal equations were numerically singular."""


class Diverged(DiffregError):
    """Loss or similarity became non-finite."""


class EmptySpec(DiffregError):
    """Phantom specification contains no shapes."""


class NoLandmarks(DiffregError):
    """Landmark list is empty."""


class EmptyInput(DiffregError):
    """Metric aggregation requires at least one value."""
