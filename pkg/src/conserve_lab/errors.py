"""Exception hierarchy shared by all modules."""


class LabError(Exception):
    """Base class for every error raised by conserve_lab."""


class FieldError(LabError, ValueError):
    """Inconsistent grids, shapes, or non-finite samples."""


class ResolutionError(LabError, ValueError):
    """A requested scale is below what the grid can resolve."""


class DegenerateLadderError(LabError, ValueError):
    """Too few usable rungs to fit a scaling law."""


class DomainError(LabError, ValueError):
    """A nonlinearity is evaluated outside the range where it is admissible."""


class GeometryError(LabError, ValueError):
    """Matrix-geometry preconditions (wave cone, hull proxy) fail."""

    def __init__(self, message: str, distance: float | None = None, cells=None):
        super().__init__(message)
        self.distance = distance
        self.cells = cells


class SnapshotError(LabError, ValueError):
    """Corrupt, truncated or incompatible snapshot files."""


class ConfigError(LabError, ValueError):
    """Invalid experiment configuration; ``problems`` lists field-level messages."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems
