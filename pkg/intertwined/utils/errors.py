"""
Exception types raised across the package
"""
from typing import Optional


class IntertwinedError(Exception):
    """Base class for every error raised by this package"""


class ShapeError(IntertwinedError, ValueError):
    """Array extents do not fit an operation"""


class KernelTooLongError(ShapeError):
    """Convolution kernel longer than the signal it slides over"""


class EmptyOutputError(ShapeError):
    """An operation would produce an array with a zero extent"""


class ConfigurationError(IntertwinedError, ValueError):
    """Invalid hyperparameter or option value"""


class InfeasibleConfigError(ConfigurationError):
    """A configuration whose time (or mesh) extent collapses before the classifier head"""

    def __init__(self, message: str, module_index: Optional[int] = None):
        super().__init__(message)
        self.module_index = module_index


class SpaceDegenerateError(ConfigurationError):
    """A search space from which no feasible configuration can be drawn"""


class ContractViolationError(IntertwinedError, RuntimeError):
    """An API was called outside its contract"""


class DataError(IntertwinedError, ValueError):
    """Problems with trial data, manifests or labels"""


class IngestionError(DataError):
    """A trial payload does not match its manifest entry"""

    def __init__(self, message: str, path: Optional[str] = None, trial_index: Optional[int] = None):
        super().__init__(message)
        self.path = path
        self.trial_index = trial_index


class StratificationError(DataError):
    """A stratified split cannot be formed"""


class FilterParameterError(DataError):
    """Filter cutoffs outside (0, Nyquist)"""


class NumericalError(IntertwinedError, ArithmeticError):
    """Non-finite values where finite ones are required"""


class TrainingDivergenceError(NumericalError):
    """Loss or gradients became non-finite during training"""

    def __init__(self, message: str, parameter: Optional[str] = None, epoch: Optional[int] = None,
                 batch: Optional[int] = None, lr: Optional[float] = None):
        super().__init__(message)
        self.parameter = parameter
        self.epoch = epoch
        self.batch = batch
        self.lr = lr


class GradientCheckError(NumericalError):
    """The finite-difference oracle produced a non-finite value"""

    def __init__(self, message: str, parameter: Optional[str] = None, coordinate: Optional[tuple] = None):
        super().__init__(message)
        self.parameter = parameter
        self.coordinate = coordinate
