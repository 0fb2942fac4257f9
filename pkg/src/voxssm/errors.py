"""Exception types raised across the package."""


class VoxSSMError(Exception):
    """Base class for package errors."""


class ShapeError(VoxSSMError, ValueError):
    """Grids with incompatible dimensions or spacing were combined."""


class NrrdParseError(VoxSSMError, ValueError):
    """An NRRD header could not be parsed."""


class UnsupportedFormatError(VoxSSMError, ValueError):
    """An NRRD file uses an encoding or type outside the supported subset."""


class SpecError(VoxSSMError, ValueError):
    """A phantom or defect specification is invalid."""


class DegenerateInputError(VoxSSMError, ValueError):
    """Registration input has no foreground."""


class DegenerateWeightsError(VoxSSMError, ValueError):
    """Weights cannot be min-max rescaled because they are all equal."""


class EmptyImplantError(VoxSSMError):
    """Post-processing removed every voxel.

    ``stage`` names the step that emptied the grid.
    """

    def __init__(self, stage: str):
        super().__init__(f"implant became empty at stage '{stage}'")
        self.stage = stage


class UndefinedMetricError(VoxSSMError, ValueError):
    """A distance metric was requested for an empty foreground."""
