"""
Computable diagnostics for meta policy optimization: MAML-stabilizing checks, stabilizing sub-level set
margins, gradient domination constants, the trust radius, and the sample-size / rollout-length calculators.

Operator norms are spectral norms, and "max" quantities are maxima over the task set.
"""
import enum
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np

from exceptions import ArgumentError
from linalg import DEFAULT_SOLVER_OPTIONS, SolverOptions, min_eigenvalue, spectral_norm
from lqr_core import LqrTask, TaskSet, as_task_set, evaluate_policy, exact_gradient, is_stable, optimal_policy

logger = logging.getLogger(__name__)

# Relative slack for comparing two sides of an inequality evaluated in floating point
INEQUALITY_SLACK = 1e-9


class CovarianceFloor(enum.Enum):
    """Which covariance lower-bounds the state covariance: sigma_min(Sigma0) or sigma_min(Psi)."""
    INITIAL = 'initial'
    NOISE = 'noise'


def covariance_floor(tasks, floor: CovarianceFloor = CovarianceFloor.INITIAL) -> float:
    tasks = as_task_set(tasks)
    if floor is CovarianceFloor.INITIAL:
        return min(min_eigenvalue(task.Sigma0) for task in tasks)
    return min(min_eigenvalue(task.Psi) for task in tasks)


def positive_covariance_floor(tasks, floor: CovarianceFloor, quantity: str) -> float:
    mu = covariance_floor(tasks, floor)
    if mu <= 0:
        raise ArgumentError(f"{quantity} needs a positive covariance floor, got {mu}")
    return mu


def available_floor(tasks) -> CovarianceFloor:
    """INITIAL when every Sigma0 is nonsingular, else NOISE (Psi is always positive definite)."""
    if covariance_floor(tasks, CovarianceFloor.INITIAL) > 0:
        return CovarianceFloor.INITIAL
    return CovarianceFloor.NOISE



def check_maml_stabilizing(tasks, K, eta: float,
                           opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> tuple[bool, ...]:
    """
    Per task: rho(A - BK) < 1 and rho(A - B(K - eta grad J(K))) < 1.

    An unstable K short-circuits the second condition to False.
    """
    tasks = as_task_set(tasks)
    flags = []
    for task in tasks:
        if not is_stable(task, K):
            flags.append(False)
            continue
        flags.append(is_stable(task, K - eta * exact_gradient(task, K, opts)))
    return tuple(flags)


def joint_stability_scan(tasks, gains: Iterable) -> np.ndarray:
    """Stability of every gain on every task, shape (number of gains, number of tasks)."""
    tasks = as_task_set(tasks)
    return np.array([[is_stable(task, K) for task in tasks] for K in gains], dtype=bool)


def gradient_domination_constant(task: LqrTask, floor: CovarianceFloor = CovarianceFloor.INITIAL,
                                 opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> float:
    """
    lambda = mu^2 sigma_min(R) / ||Sigma_{K*}||, so that J(K) - J(K*) <= ||grad J(K)||_F^2 / lambda.

    :param floor: CovarianceFloor selecting mu = sigma_min(Sigma0) (INITIAL) or sigma_min(Psi) (NOISE)

    :raises ArgumentError: if the selected covariance is singular
    """
    mu = positive_covariance_floor(task, floor, "gradient domination")
    K_star, _ = optimal_policy(task, opts)
    sigma_star = evaluate_policy(task, K_star, opts).Sigma
    return mu ** 2 * min_eigenvalue(task.R) / spectral_norm(sigma_star)


@dataclass(frozen=True)
class GradientDominationCounterexample:
    task_index: int
    K: list
    gap: float
    bound: float
    branch: str
    floor: str


def check_gradient_domination(task: LqrTask, gains: Iterable, floor: CovarianceFloor = CovarianceFloor.NOISE,
                              task_index: int = 0,
                              opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> list[GradientDominationCounterexample]:
    """
    Test both branches of gradient domination on every stabilizing gain:

      upper: J(K) - J(K*) <= ||grad J(K)||_F^2 / lambda
      lower: J(K) - J(K*) >= mu Tr(E^T E) / ||R + B^T P_K B||

    Unstable gains are skipped. Every violation is returned and logged.
    """
    K_star, optimal_cost = optimal_policy(task, opts)
    lam = gradient_domination_constant(task, floor, opts)
    mu = covariance_floor(task, floor)
    counterexamples = []
    for K in gains:
        if not is_stable(task, K):
            continue
        evaluation = evaluate_policy(task, K, opts)
        gap = evaluation.cost - optimal_cost
        gradient = 2.0 * evaluation.E @ evaluation.Sigma
        upper = float(np.sum(gradient * gradient)) / lam
        lower = mu * float(np.sum(evaluation.E * evaluation.E)) / spectral_norm(evaluation.curvature)
        slack = INEQUALITY_SLACK * max(1.0, abs(evaluation.cost))
        for branch, violated, bound in (('upper', gap > upper + slack, upper),
                                        ('lower', gap < lower - slack, lower)):
            if violated:
                counterexample = GradientDominationCounterexample(
                    task_index=task_index, K=np.asarray(K, dtype=float).tolist(), gap=gap, bound=bound,
                    branch=branch, floor=floor.value)
                logger.warning("Gradient domination %s branch violated on task %d: gap %.6e, bound %.6e",
                               branch, task_index, gap, bound)
                counterexamples.append(counterexample)
    return counterexamples


def trust_radius(tasks, K, floor: CovarianceFloor = CovarianceFloor.INITIAL,
                 opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> float:
    """
    h(K) = min_i sigma_min(Q_i) mu / (4 ||B||_max J_max(K) (||A - BK||_max + 1)).

    :raises InstabilityError: if K does not stabilize every task
    :raises ArgumentError: if the selected covariance is singular
    """
    tasks = as_task_set(tasks)
    mu = positive_covariance_floor(tasks, floor, "trust radius")
    cost_max = max(evaluate_policy(task, K, opts).cost for task in tasks)
    input_max = max(spectral_norm(task.B) for task in tasks)
    closed_max = max(spectral_norm(task.closed_loop(np.asarray(K, dtype=float))) for task in tasks)
    state_cost_min = min(min_eigenvalue(task.Q) for task in tasks)
    return state_cost_min * mu / (4.0 * input_max * cost_max * (closed_max + 1.0))


def bernstein_sample_size(dim1: int, dim2: int, variance_proxy: float, range_proxy: float,
                          epsilon: float, delta: float) -> int:
    """
    Smallest m with m >= (2 n / eps^2) (sigma^2 + B eps / (3 sqrt(n))) log((dim1 + dim2) / delta), n = min(dim1, dim2),
      the number of samples after which a matrix Bernstein bound gives an eps-accurate average with
      probability at least 1 - delta.
    """
    if dim1 < 1 or dim2 < 1:
        raise ArgumentError("dimensions must be positive")
    if not 0 < epsilon < 1 or not 0 < delta < 1:
        raise ArgumentError("epsilon and delta must lie in (0, 1)")
    if variance_proxy <= 0 or range_proxy <= 0:
        raise ArgumentError("variance and range proxies must be positive")
    n = min(dim1, dim2)
    bound = (2.0 * n / epsilon ** 2) * (variance_proxy + range_proxy * epsilon / (3.0 * math.sqrt(n))) \
        * math.log((dim1 + dim2) / delta)
    return max(1, math.ceil(bound))


def rollout_length_bound(tasks, K, epsilon: float, floor: CovarianceFloor = CovarianceFloor.INITIAL,
                         opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> int:
    """
    Rollout length after which the finite-horizon cost is within epsilon of the average cost:
      l >= d J_max(K)^2 (||Q||_max + ||R||_max ||K||^2) / (epsilon mu sigma_min(Q)^2).

    :raises InstabilityError: if K does not stabilize every task
    """
    if epsilon <= 0:
        raise ArgumentError(f"epsilon must be positive, got {epsilon}")
    tasks = as_task_set(tasks)
    mu = positive_covariance_floor(tasks, floor, "rollout length bound")
    cost_max = max(evaluate_policy(task, K, opts).cost for task in tasks)
    state_cost_max = max(spectral_norm(task.Q) for task in tasks)
    input_cost_max = max(spectral_norm(task.R) for task in tasks)
    state_cost_min = min(min_eigenvalue(task.Q) for task in tasks)
    gain_norm = spectral_norm(K)
    bound = tasks.state_dim * cost_max ** 2 * (state_cost_max + input_cost_max * gain_norm ** 2) \
        / (epsilon * mu * state_cost_min ** 2)
    return max(1, math.ceil(bound))


@dataclass(frozen=True)
class TaskDiagnostics:
    task_index: int
    stable: bool
    maml_stabilizing: bool
    lambda_i: Optional[float]
    lambda_i_noise_floor: float
    cost: Optional[float] = None
    optimality_gap: Optional[float] = None
    sublevel_margin: Optional[float] = None
    trust_radius: Optional[float] = None
    graddom_satisfied: Optional[bool] = None
    graddom_satisfied_noise_floor: Optional[bool] = None
    graddom_lower_satisfied: Optional[bool] = None


@dataclass(frozen=True)
class DiagnosticsReport:
    eta: float
    gamma: float
    policy: list
    tasks: tuple[TaskDiagnostics, ...]
    trust_radius: Optional[float] = None
    trust_radius_floor: str = CovarianceFloor.INITIAL.value
    counterexamples: tuple[GradientDominationCounterexample, ...] = field(default=())

    @property
    def all_maml_stabilizing(self) -> bool:
        return all(task.maml_stabilizing for task in self.tasks)

    def to_dict(self) -> dict:
        return asdict(self)


def diagnose(tasks, K, eta: float, K0=None, gamma: float = 1.0,
             opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> DiagnosticsReport:
    """
    Per-task diagnostics of the policy K.

    :param tasks: TaskSet (or a single LqrTask)
    :param K: policy to diagnose
    :param eta: adaptation rate of the MAML-stabilizing check
    :param K0: initial policy defining the sub-level sets J_i(K) - J_i(K*_i) <= gamma (J_i(K0) - J_i(K*_i));
      defaults to K itself
    :param gamma: positive sub-level scale

    :return: DiagnosticsReport; quantities that need a stabilizing K are None on tasks K does not stabilize,
      lambda_i is None on tasks with a singular Sigma0 and the trust radius then uses the noise floor
    """
    if gamma <= 0:
        raise ArgumentError(f"gamma must be positive, got {gamma}")
    tasks = as_task_set(tasks)
    K = tasks[0].check_gain(K)
    K0 = K if K0 is None else tasks[0].check_gain(K0, "K0")
    flags = check_maml_stabilizing(tasks, K, eta, opts)
    radius_floor = available_floor(tasks)
    if radius_floor is not CovarianceFloor.INITIAL:
        logger.warning("Sigma0 is singular on some task, lambda_i is not reported and trust radii use "
                       "the noise covariance floor")

    rows = []
    counterexamples = []
    for index, (task, maml_stabilizing) in enumerate(zip(tasks, flags)):
        lam = None
        if covariance_floor(task, CovarianceFloor.INITIAL) > 0:
            lam = gradient_domination_constant(task, CovarianceFloor.INITIAL, opts)
        lam_noise = gradient_domination_constant(task, CovarianceFloor.NOISE, opts)
        if not is_stable(task, K):
            rows.append(TaskDiagnostics(index, False, False, lam, lam_noise))
            continue
        _, optimal_cost = optimal_policy(task, opts)
        evaluation = evaluate_policy(task, K, opts)
        gap = evaluation.cost - optimal_cost
        margin = None
        if is_stable(task, K0):
            margin = gamma * (evaluate_policy(task, K0, opts).cost - optimal_cost) - gap
        squared_gradient = float(np.sum((2.0 * evaluation.E @ evaluation.Sigma) ** 2))
        slack = INEQUALITY_SLACK * max(1.0, abs(evaluation.cost))
        noise_violations = check_gradient_domination(task, [K], CovarianceFloor.NOISE, index, opts)
        counterexamples.extend(noise_violations)
        rows.append(TaskDiagnostics(
            task_index=index,
            stable=True,
            maml_stabilizing=maml_stabilizing,
            lambda_i=lam,
            lambda_i_noise_floor=lam_noise,
            cost=evaluation.cost,
            optimality_gap=gap,
            sublevel_margin=margin,
            trust_radius=trust_radius(task, K, available_floor(task), opts),
            graddom_satisfied=None if lam is None else gap <= squared_gradient / lam + slack,
            graddom_satisfied_noise_floor=not any(c.branch == 'upper' for c in noise_violations),
            graddom_lower_satisfied=not any(c.branch == 'lower' for c in noise_violations),
        ))

    set_radius = trust_radius(tasks, K, radius_floor, opts) if all(row.stable for row in rows) else None
    return DiagnosticsReport(eta=eta, gamma=gamma, policy=K.tolist(), tasks=tuple(rows), trust_radius=set_radius,
                             trust_radius_floor=radius_floor.value,
                             counterexamples=tuple(counterexamples))
