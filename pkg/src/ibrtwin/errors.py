"""Exception hierarchy shared across the package."""


class IbrTwinError(Exception):
    """Base class for all package errors."""


# -- data / ingestion --------------------------------------------------------


class DataError(IbrTwinError, ValueError):
    pass


class MissingColumn(DataError):
    pass


class NonUniformSampling(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class EmptyFile(DataError):
    pass


class EmptyDataset(DataError):
    pass


class ChannelCountMismatch(DataError):
    pass


# -- model structure / prediction --------------------------------------------


class ModelError(IbrTwinError, ValueError):
    pass


class InsufficientData(ModelError):
    pass


class LagShortfall(ModelError):
    pass


class ChannelMismatch(ModelError):
    pass


class DimensionMismatch(ModelError):
    pass


# -- estimation ---------------------------------------------------------------


class EstimationError(IbrTwinError):
    pass


class SingularNormalEquations(EstimationError):
    pass


class NonFiniteUpdate(EstimationError):
    pass


class NoConvergenceWarning(UserWarning):
    """Emitted when extended least squares stops at the iteration cap."""


# -- simulation ---------------------------------------------------------------


class SimulationError(IbrTwinError):
    pass


class VoltageCollapse(SimulationError):
    pass


class UnstableTruth(SimulationError):
    pass


# -- monitoring ---------------------------------------------------------------


class MonitorError(IbrTwinError):
    pass


class OutOfOrderSample(MonitorError):
    pass


class InsufficientHistory(MonitorError):
    pass


class FitFailed(MonitorError):
    pass


# -- metrics ------------------------------------------------------------------


class LengthMismatch(IbrTwinError, ValueError):
    pass


class EmptySuite(IbrTwinError, ValueError):
    pass
