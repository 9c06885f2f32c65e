"""Exception hierarchy shared by all gridtwin modules.

Each family carries an ``exit_code`` so the command line can map failures to
distinct process exit statuses without inspecting messages.
"""


class GridTwinError(Exception):
    exit_code = 1


class CaseError(GridTwinError):
    exit_code = 3


class CaseSyntaxError(CaseError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CaseSemanticError(CaseError):
    pass


class BranchEditError(CaseError):
    pass


class DimensionError(GridTwinError, ValueError):
    exit_code = 2


class PowerFlowError(GridTwinError):
    exit_code = 4


class NonConvergence(PowerFlowError):
    def __init__(self, message, iterations=None, mismatch=None, sample=None):
        self.iterations = iterations
        self.mismatch = mismatch
        self.sample = sample
        super().__init__(message)


class SingularJacobian(PowerFlowError):
    pass


class EstimationError(GridTwinError):
    exit_code = 5


class Underdetermined(EstimationError):
    pass


class IllConditioned(EstimationError):
    def __init__(self, message, rank=None, condition=None):
        self.rank = rank
        self.condition = condition
        super().__init__(message)


class DegenerateData(EstimationError):
    """Zero-variance rows or other data that cannot be normalized."""


class TrainingDiverged(EstimationError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message)


class ConfigError(GridTwinError):
    exit_code = 2


class IOFailure(GridTwinError):
    exit_code = 6
