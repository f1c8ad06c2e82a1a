"""Exception types raised by the spike pipeline."""


class SpikeError(Exception):
    """Base class for all library errors."""


class NoDecayBracket(SpikeError):
    pass


class ToleranceNotMet(SpikeError):
    pass


class IterationDiverged(SpikeError):
    pass


class MeshTooCoarse(SpikeError):
    pass


class PointOutsideDomain(SpikeError):
    pass


class LinearSolveFailed(SpikeError):
    pass


class SaddleSingular(LinearSolveFailed):
    """Bordered system is singular: the projection directions are degenerate."""


class ContractionFailed(SpikeError):
    """Fixed-point map for the correction did not contract."""


class NewtonDiverged(SpikeError):
    pass


class NoClearance(SpikeError):
    """No candidate insertion point has the required clearance."""


class InfeasibleConfiguration(SpikeError):
    pass
