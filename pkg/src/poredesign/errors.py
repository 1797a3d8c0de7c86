"""Exception hierarchy.  Every domain failure derives from ``PoreDesignError``."""


class PoreDesignError(Exception):
    pass


class ConfigError(PoreDesignError, ValueError):
    pass


class FormatError(PoreDesignError, ValueError):
    """Malformed or truncated file."""


class ShapeError(PoreDesignError, ValueError):
    pass


class DivergenceError(PoreDesignError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConvergenceError(PoreDesignError):
    def __init__(self, message, residual=None, steps=None):
        super().__init__(message)
        self.residual = residual
        self.steps = steps


class ImpermeableError(PoreDesignError):
    """No connected pore path between the inlet and outlet faces."""


class SolverError(PoreDesignError):
    """Wraps a flow-solver failure with the axis and boundary mode it came from."""

    def __init__(self, message, axis=None, mode=None):
        super().__init__(message)
        self.axis = axis
        self.mode = mode


class DegenerateGradientError(PoreDesignError, ValueError):
    pass


class InconsistentRunError(PoreDesignError):
    pass


class ModelStateError(PoreDesignError):
    pass
