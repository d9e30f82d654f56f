"""Exception hierarchy shared by every stage of the pipeline."""


class BevOccError(Exception):
    """Base class for all library errors."""


class ContractError(BevOccError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(ContractError):
    """Invalid configuration value or unknown configuration key."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible with an operation."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        shape_txt = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shape_txt}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class OutOfRangeError(ContractError):
    """A coordinate fell outside its valid domain."""


class OutOfRoiError(OutOfRangeError):
    """A point lies outside the region-of-interest box."""


class DegenerateRayError(ContractError):
    """A ray has zero length (point coincides with the sensor origin)."""

    def __init__(self, indices):
        self.indices = list(indices)
        super().__init__(f"degenerate rays at indices {self.indices}")


class EmptySweepError(BevOccError):
    """A simulated LiDAR sweep produced no returns."""


class UnsatisfiableSamplingError(BevOccError):
    """No in-ROI candidate query points could be drawn."""


class EmptyMetricError(BevOccError):
    """A metric has no valid elements to average over."""


class IncompleteTableError(ContractError):
    """A ranking table is missing a cell."""


class FormatError(BevOccError):
    """A binary or text artifact is malformed."""


class TrainingDivergedError(BevOccError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, step=None, param=None, checkpoint=None):
        self.step = step
        self.param = param
        self.checkpoint = checkpoint
        super().__init__(message)
