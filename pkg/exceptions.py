"""Errors raised by the meta LQR benchmark.

Every error derives from MetaLqrError and from the builtin exception a caller would
naturally catch (ValueError for bad input, ArithmeticError for unstable numerics,
RuntimeError for solvers that did not finish).
"""
from typing import Optional


class MetaLqrError(Exception):
    pass


class ArgumentError(MetaLqrError, ValueError):
    pass


class DimensionError(ArgumentError):
    pass


class ConfigError(ArgumentError):
    def __init__(self, field: str, message: str):
        super().__init__(f"invalid config field '{field}': {message}")
        self.field = field


class InstabilityError(MetaLqrError, ArithmeticError):
    """
    A gain is not stabilizing where a stabilizing gain is required.

    :param radius: spectral radius of the offending closed loop, if known
    :param task_index: index of the task in its TaskSet, if known
    :param condition: 'policy' when rho(A - BK) >= 1, 'adapted' when the one-step adapted gain fails
    :param iteration: outer iteration of a meta optimization run, if known
    """

    def __init__(self, message: str, radius: Optional[float] = None, task_index: Optional[int] = None,
                 condition: Optional[str] = None, iteration: Optional[int] = None):
        super().__init__(message)
        self.radius = radius
        self.task_index = task_index
        self.condition = condition
        self.iteration = iteration


class StabilityViolationError(InstabilityError):
    """The policy left the MAML-stabilizing set during a run; `trace` holds every record up to the violation."""

    def __init__(self, message: str, iteration: int, trace=None, task_index: Optional[int] = None,
                 condition: Optional[str] = None):
        super().__init__(message, task_index=task_index, condition=condition, iteration=iteration)
        self.trace = trace


class ConvergenceError(MetaLqrError, RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class DivergenceError(MetaLqrError, ArithmeticError):
    def __init__(self, message: str, step: int, task_index: Optional[int] = None,
                 perturbation_index: Optional[int] = None):
        super().__init__(message)
        self.step = step
        self.task_index = task_index
        self.perturbation_index = perturbation_index


class GenerationError(MetaLqrError, RuntimeError):
    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts
