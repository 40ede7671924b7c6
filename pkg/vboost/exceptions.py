from typing import Optional

import numpy as np


class VBoostError(Exception):
    """Base class for every error raised by vboost"""


class ConfigError(VBoostError):
    """Run configuration is malformed or holds invalid values"""


class DataFormatError(VBoostError):
    """Input data file is malformed or violates the model's invariants"""


class TargetSpecError(VBoostError):
    """Target model parameters are invalid (e.g. a non-SPD covariance)"""


class EstimatorError(VBoostError):
    """Target returned a non-finite value at a drawn point"""

    def __init__(self, message: str, point: Optional[np.ndarray] = None):
        super().__init__(message)
        self.point = point


class NonFiniteGradientError(VBoostError):
    """Optimizer met a non-finite gradient or produced non-finite parameters"""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class InitializationError(VBoostError):
    """New component could not be initialized from importance-weighted samples"""


class GridTooSmallError(VBoostError):
    """Quadrature grid boundary carries non-negligible mass"""


class StageError(VBoostError):
    """A boosting stage failed; wraps the original error"""

    def __init__(self, message: str, stage: int):
        super().__init__(message)
        self.stage = stage


class FactorizationError(VBoostError):
    """Inner r x r Cholesky of a low-rank plus diagonal covariance failed"""
