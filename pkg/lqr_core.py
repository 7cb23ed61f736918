"""
Model-based LQR oracles: task definition, exact average cost, policy gradient, Hessian action,
meta-gradient and the first-order update rules.

Sign convention throughout is u = -K x, so the closed loop is A - B K.
"""
import enum
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Optional, Sequence

import numpy as np
import scipy.linalg as la

from exceptions import ArgumentError, DimensionError, InstabilityError, MetaLqrError
from linalg import DEFAULT_SOLVER_OPTIONS, SolverOptions, as_matrix, is_positive_definite, \
    is_positive_semidefinite, solve_dare, solve_discrete_lyapunov, spectral_radius, symmetrize

logger = logging.getLogger(__name__)

WEIGHT_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class LqrTask:
    """
    One linear time-invariant system x_{t+1} = A x_t + B u_t + w_t with quadratic stage cost x^T Q x + u^T R u,
      noise w_t ~ N(0, Psi) and initial state x_0 ~ N(0, Sigma0).
    """
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Psi: np.ndarray
    Sigma0: np.ndarray

    def __post_init__(self):
        for name in ('A', 'B', 'Q', 'R', 'Psi', 'Sigma0'):
            object.__setattr__(self, name, as_matrix(getattr(self, name), name))
        d, k = self.B.shape
        expected = {'A': (d, d), 'Q': (d, d), 'R': (k, k), 'Psi': (d, d), 'Sigma0': (d, d)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} must have shape {shape}, got {getattr(self, name).shape}")
        for name in ('Q', 'Sigma0'):
            if not is_positive_semidefinite(getattr(self, name)):
                raise ArgumentError(f"{name} must be symmetric positive semi-definite")
        for name in ('R', 'Psi'):
            if not is_positive_definite(getattr(self, name)):
                raise ArgumentError(f"{name} must be symmetric positive definite")

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def control_dim(self) -> int:
        return self.B.shape[1]

    @cached_property
    def noise_factor(self) -> np.ndarray:
        """Lower Cholesky factor L with L L^T = Psi."""
        return la.cholesky(symmetrize(self.Psi), lower=True)

    @cached_property
    def initial_factor(self) -> np.ndarray:
        """Factor S with S S^T = Sigma0; Sigma0 may be singular so an eigen-factorisation is used."""
        eigenvalues, eigenvectors = la.eigh(symmetrize(self.Sigma0))
        return eigenvectors * np.sqrt(np.clip(eigenvalues, 0.0, None))

    def closed_loop(self, K: np.ndarray) -> np.ndarray:
        return self.A - self.B @ K

    def stage_cost_matrix(self, K: np.ndarray) -> np.ndarray:
        """Q + K^T R K, the state weight of the closed loop."""
        return self.Q + K.T @ self.R @ K

    def check_gain(self, K, name: str = "K") -> np.ndarray:
        K = as_matrix(K, name)
        if K.shape != (self.control_dim, self.state_dim):
            raise DimensionError(f"{name} must have shape {(self.control_dim, self.state_dim)}, got {K.shape}")
        return K


@dataclass(frozen=True, eq=False)
class TaskSet:
    """An ordered collection of tasks with a prior probability vector over them."""
    tasks: tuple[LqrTask, ...]
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise ArgumentError("a TaskSet needs at least one task")
        object.__setattr__(self, 'tasks', tasks)
        d, k = tasks[0].state_dim, tasks[0].control_dim
        for index, task in enumerate(tasks):
            if (task.state_dim, task.control_dim) != (d, k):
                raise DimensionError(f"task {index} has dimensions {(task.state_dim, task.control_dim)}, "
                                     f"expected {(d, k)}")
        if self.weights is None:
            weights = np.full(len(tasks), 1.0 / len(tasks))
        else:
            try:
                weights = np.asarray(self.weights, dtype=float).reshape(-1)
            except (TypeError, ValueError):
                raise ArgumentError("weights must be a list of numbers")
        if weights.shape != (len(tasks),):
            raise DimensionError(f"weights must have {len(tasks)} entries, got {weights.shape}")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > WEIGHT_TOLERANCE:
            raise ArgumentError("weights must be nonnegative and sum to one")
        object.__setattr__(self, 'weights', weights)

    @classmethod
    def uniform(cls, tasks: Sequence[LqrTask]) -> 'TaskSet':
        return cls(tuple(tasks))

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self) -> Iterator[LqrTask]:
        return iter(self.tasks)

    def __getitem__(self, index: int) -> LqrTask:
        return self.tasks[index]

    @property
    def state_dim(self) -> int:
        return self.tasks[0].state_dim

    @property
    def control_dim(self) -> int:
        return self.tasks[0].control_dim


def as_task_set(tasks) -> TaskSet:
    if isinstance(tasks, TaskSet):
        return tasks
    if isinstance(tasks, LqrTask):
        return TaskSet((tasks,))
    return TaskSet(tuple(tasks))


@dataclass(frozen=True, eq=False)
class PolicyEvaluation:
    P: np.ndarray
    Sigma: np.ndarray
    E: np.ndarray
    cost: float
    K: np.ndarray
    task: LqrTask

    @property
    def gramian_cost(self) -> float:
        """Tr((Q + K^T R K) Sigma), equal to cost = Tr(P Psi) at the fixed points."""
        return float(np.trace(self.task.stage_cost_matrix(self.K) @ self.Sigma))

    @property
    def curvature(self) -> np.ndarray:
        """R + B^T P B."""
        return self.task.R + self.task.B.T @ self.P @ self.task.B


class UpdateRule(enum.Enum):
    GD = 'gd'
    NATURAL_GD = 'natural_gd'
    GAUSS_NEWTON = 'gauss_newton'


def is_stable(task: LqrTask, K) -> bool:
    K = task.check_gain(K)
    return spectral_radius(task.closed_loop(K)) < 1


def require_stable(task: LqrTask, K: np.ndarray, task_index: Optional[int] = None,
                   condition: str = 'policy') -> np.ndarray:
    closed = task.closed_loop(K)
    radius = spectral_radius(closed)
    if radius >= 1:
        where = "" if task_index is None else f" for task {task_index}"
        raise InstabilityError(f"gain is not stabilizing{where}: rho(A - BK) = {radius:.6f}",
                               radius=radius, task_index=task_index, condition=condition)
    return closed


def evaluate_policy(task: LqrTask, K, opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> PolicyEvaluation:
    """
    Exact average cost of u = -K x on task, with the value matrix P_K, the Gramian Sigma_K and E_K.

    :param task: LqrTask to evaluate on
    :param K: k x d gain
    :param opts: SolverOptions for both Lyapunov solves

    :return: PolicyEvaluation with cost = Tr(P Psi)

    :raises InstabilityError: if rho(A - BK) >= 1
    """
    K = task.check_gain(K)
    closed = require_stable(task, K)
    P = solve_discrete_lyapunov(closed.T, task.stage_cost_matrix(K), opts)
    Sigma = solve_discrete_lyapunov(closed, task.Psi, opts)
    E = (task.R + task.B.T @ P @ task.B) @ K - task.B.T @ P @ task.A
    cost = float(np.trace(P @ task.Psi))
    return PolicyEvaluation(P=P, Sigma=Sigma, E=E, cost=cost, K=K, task=task)


def exact_gradient(task: LqrTask, K, opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> np.ndarray:
    evaluation = evaluate_policy(task, K, opts)
    return 2.0 * evaluation.E @ evaluation.Sigma


def _hessian_action(evaluation: PolicyEvaluation, X: np.ndarray, opts: SolverOptions) -> np.ndarray:
    task, K = evaluation.task, evaluation.K
    closed = task.closed_loop(K)
    P_tilde = solve_discrete_lyapunov(closed.T, symmetrize(X.T @ evaluation.E + evaluation.E.T @ X), opts)
    shift = task.B @ X @ evaluation.Sigma @ closed.T
    Sigma_tilde = solve_discrete_lyapunov(closed, -symmetrize(shift + shift.T), opts)
    return 2.0 * evaluation.curvature @ X @ evaluation.Sigma \
        - 2.0 * task.B.T @ P_tilde @ closed @ evaluation.Sigma \
        + 2.0 * evaluation.E @ Sigma_tilde


def exact_hessian_action(task: LqrTask, K, X, opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> np.ndarray:
    """
    The Hessian of J at K applied to the direction X:
      2 (R + B^T P B) X Sigma - 2 B^T P~[X] (A - BK) Sigma + 2 E Sigma~[X],
      where P~[X] = (A - BK)^T P~[X] (A - BK) + X^T E + E^T X
      and Sigma~[X] = (A - BK) Sigma~[X] (A - BK)^T - B X Sigma (A - BK)^T - (A - BK) Sigma X^T B^T.

    :raises InstabilityError: if rho(A - BK) >= 1
    :raises DimensionError: if X is not k x d
    """
    X = task.check_gain(X, "X")
    return _hessian_action(evaluate_policy(task, K, opts), X, opts)


def adapted_gain(task: LqrTask, K, eta: float, opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> np.ndarray:
    """The one-step adapted gain K - eta grad J(K)."""
    K = task.check_gain(K)
    return K - eta * exact_gradient(task, K, opts)


def _check_eta(eta: float):
    if eta < 0:
        raise ArgumentError(f"adaptation rate must be nonnegative, got {eta}")


def _task_meta_terms(task: LqrTask, index: int, K: np.ndarray, eta: float,
                     opts: SolverOptions) -> tuple[PolicyEvaluation, np.ndarray, PolicyEvaluation]:
    """Evaluate one task at K and at its adapted gain, naming the stability condition that fails."""
    require_stable(task, K, task_index=index, condition='policy')
    evaluation = evaluate_policy(task, K, opts)
    K_adapted = K - eta * 2.0 * evaluation.E @ evaluation.Sigma
    require_stable(task, K_adapted, task_index=index, condition='adapted')
    return evaluation, K_adapted, evaluate_policy(task, K_adapted, opts)


def exact_meta_gradient(tasks: TaskSet, K, eta: float,
                        opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> np.ndarray:
    """
    Gradient of the one-step-adaptation objective, E_i[(I - eta H_i(K)) grad J_i(K - eta grad J_i(K))].

    The Hessian is self-adjoint, so (I - eta H) g is computed as g - eta H[g].

    :raises InstabilityError: naming the task index and the failing condition ('policy' or 'adapted')
      when K is not MAML-stabilizing
    """
    _check_eta(eta)
    tasks = as_task_set(tasks)
    K = tasks[0].check_gain(K)
    meta_gradient = np.zeros_like(K)
    for index, (task, weight) in enumerate(zip(tasks, tasks.weights)):
        evaluation, _, adapted = _task_meta_terms(task, index, K, eta, opts)
        adapted_grad = 2.0 * adapted.E @ adapted.Sigma
        if eta > 0:
            adapted_grad = adapted_grad - eta * _hessian_action(evaluation, adapted_grad, opts)
        meta_gradient += weight * adapted_grad
    return meta_gradient


def meta_objective(tasks: TaskSet, K, eta: float, opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> float:
    """Weighted average of J_i(K - eta grad J_i(K)); raises like exact_meta_gradient."""
    _check_eta(eta)
    tasks = as_task_set(tasks)
    K = tasks[0].check_gain(K)
    value = 0.0
    for index, (task, weight) in enumerate(zip(tasks, tasks.weights)):
        _, _, adapted = _task_meta_terms(task, index, K, eta, opts)
        value += weight * adapted.cost
    return float(value)


def policy_update(task: LqrTask, K, step: float, rule: UpdateRule = UpdateRule.GD,
                  opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> np.ndarray:
    """
    One first-order step on a single task.

      GD:           K - step grad J
      NATURAL_GD:   K - step grad J Sigma^-1
      GAUSS_NEWTON: K - step (R + B^T P B)^-1 grad J Sigma^-1

    :raises InstabilityError: if K is not stabilizing
    """
    if step < 0:
        raise ArgumentError(f"step must be nonnegative, got {step}")
    evaluation = evaluate_policy(task, K, opts)
    gradient = 2.0 * evaluation.E @ evaluation.Sigma
    if rule is UpdateRule.GD:
        return evaluation.K - step * gradient

    if not is_positive_definite(evaluation.Sigma):
        raise MetaLqrError("Gramian is not positive definite although Psi is")
    # grad J Sigma^-1, solved against the symmetric Gramian from the right
    natural = la.solve(evaluation.Sigma, gradient.T, assume_a='pos').T
    if rule is UpdateRule.NATURAL_GD:
        return evaluation.K - step * natural
    if rule is UpdateRule.GAUSS_NEWTON:
        return evaluation.K - step * la.solve(evaluation.curvature, natural, assume_a='pos')
    raise ArgumentError(f"unknown update rule {rule}")


def optimal_policy(task: LqrTask, opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> tuple[np.ndarray, float]:
    """K* from the Riccati equation and its cost J(K*)."""
    _, K_star = solve_dare(task.A, task.B, task.Q, task.R, opts)
    return K_star, evaluate_policy(task, K_star, opts).cost
