"""
Exception hierarchy for the sleep-fusion toolkit.
Every error carries a default detail message and the exit code cli.py returns for it.
"""


class SleepFusionError(Exception):
    """Base class for all toolkit failures"""
    exit_code = 1

    def __init__(self, detail: str = "Sleep fusion pipeline failed"):
        super().__init__(detail)
        self.detail = detail


# =====================================================
# CONFIGURATION
# =====================================================

class ConfigError(SleepFusionError):
    """Invalid or unreadable configuration"""
    exit_code = 3

    def __init__(self, detail: str = "Invalid configuration"):
        super().__init__(detail)


# =====================================================
# DATA
# =====================================================

class DataError(SleepFusionError):
    """Input data is missing, malformed or inconsistent"""
    exit_code = 4

    def __init__(self, detail: str = "Invalid input data"):
        super().__init__(detail)


class SignalError(DataError):
    """A signal cannot be processed with the requested parameters"""

    def __init__(self, detail: str = "Signal cannot be processed"):
        super().__init__(detail)


class ContainerError(DataError):
    """Recording container has a bad magic, version, header or payload"""

    def __init__(self, detail: str = "Corrupt recording container"):
        super().__init__(detail)


# =====================================================
# MODELS
# =====================================================

class ModelError(SleepFusionError):
    """Model construction, evaluation or checkpoint failure"""
    exit_code = 5

    def __init__(self, detail: str = "Model error"):
        super().__init__(detail)


class ShapeError(ModelError, ValueError):
    """Tensor shapes do not fit the operation"""

    def __init__(self, detail: str = "Shape mismatch"):
        super().__init__(detail)


class NumericalError(ModelError):
    """An operation produced NaN or Inf"""

    def __init__(self, detail: str = "Non-finite values in computation"):
        super().__init__(detail)


class GraphError(ModelError):
    """Backward pass requested on a graph that cannot produce gradients"""

    def __init__(self, detail: str = "Loss is not connected to any trainable parameter"):
        super().__init__(detail)


class CheckpointError(ModelError):
    """Parameter checkpoint cannot be read, written or verified"""

    def __init__(self, detail: str = "Invalid checkpoint"):
        super().__init__(detail)


class TrainingDivergedError(ModelError):
    """Training produced a non-finite loss"""

    def __init__(self, detail: str = "Training diverged (non-finite loss)"):
        super().__init__(detail)
