"""
Zeroth-order (Hessian-free) meta policy optimization over LQR tasks.

The three algorithms live here: sphere-perturbation gradient estimation, meta-gradient estimation through
one-step adapted perturbed gains, and the outer meta policy optimization loop that produces a LearningTrace.
"""
import abc
import enum
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from exceptions import ArgumentError, DivergenceError, InstabilityError, StabilityViolationError
from linalg import DEFAULT_SOLVER_OPTIONS, SolverOptions, frobenius_norm
from lqr_core import LqrTask, TaskSet, as_task_set, evaluate_policy, exact_gradient, exact_meta_gradient, \
    is_stable, meta_objective, optimal_policy
from rollout_sim import MAX_SEED, RngStream, StreamPurpose, rollout_batch
from theory_diag import check_maml_stabilizing

logger = logging.getLogger(__name__)


class EstimatorKind(enum.Enum):
    ONE_POINT = 'one_point'
    # Antithetic pair J(K + U) - J(K - U) on common rollout noise
    TWO_POINT = 'two_point'


class GradientMethod(enum.Enum):
    ZEROTH_ORDER = 'zeroth_order'
    EXACT = 'exact'


class OptimizationMode(enum.Enum):
    ZEROTH_ORDER = 'zeroth'
    EXACT_ORACLE = 'exact'


@dataclass(frozen=True)
class SmoothingParams:
    radius: float = 0.05
    num_perturbations: int = 100
    horizon: int = 50
    estimator: EstimatorKind = EstimatorKind.ONE_POINT

    def __post_init__(self):
        if not self.radius > 0:
            raise ArgumentError(f"smoothing radius must be positive, got {self.radius}")
        if self.num_perturbations < 1:
            raise ArgumentError(f"num_perturbations must be at least 1, got {self.num_perturbations}")
        if self.horizon < 1:
            raise ArgumentError(f"horizon must be at least 1, got {self.horizon}")
        object.__setattr__(self, 'estimator', EstimatorKind(self.estimator))

    @property
    def evaluations_per_perturbation(self) -> int:
        return 2 if self.estimator is EstimatorKind.TWO_POINT else 1


@dataclass(frozen=True)
class MetaConfig:
    """
    Hyperparameters of meta policy optimization; the defaults suit tasks with d <= 2.

    adaptation_rate may be zero, which disables the inner adaptation step entirely.
    inner_num_perturbations overrides M for the inner gradient estimates; by default inner and outer share M.
    """
    adaptation_rate: float = 1e-5
    learning_rate: float = 1e-3
    smoothing: SmoothingParams = field(default_factory=SmoothingParams)
    task_batch_size: int = 5
    max_iterations: int = 1000
    tolerance: float = 0.0
    seed: int = 0
    inner_num_perturbations: Optional[int] = None
    check_stability: bool = True
    stop_on_violation: bool = True
    report_exact_error: bool = False
    workers: int = 1
    log_every: int = 10

    def __post_init__(self):
        if self.adaptation_rate < 0:
            raise ArgumentError(f"adaptation_rate must be nonnegative, got {self.adaptation_rate}")
        if not self.learning_rate > 0:
            raise ArgumentError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.task_batch_size < 1:
            raise ArgumentError(f"task_batch_size must be at least 1, got {self.task_batch_size}")
        if self.max_iterations < 0:
            raise ArgumentError(f"max_iterations must be nonnegative, got {self.max_iterations}")
        if not self.tolerance >= 0:
            raise ArgumentError(f"tolerance must be nonnegative, got {self.tolerance}")
        if not 0 <= self.seed < MAX_SEED:
            raise ArgumentError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.inner_num_perturbations is not None and self.inner_num_perturbations < 1:
            raise ArgumentError(f"inner_num_perturbations must be at least 1, got {self.inner_num_perturbations}")
        if self.workers < 1:
            raise ArgumentError(f"workers must be at least 1, got {self.workers}")
        if self.log_every < 1:
            raise ArgumentError(f"log_every must be at least 1, got {self.log_every}")

    @property
    def inner_smoothing(self) -> SmoothingParams:
        if self.inner_num_perturbations is None:
            return self.smoothing
        return replace(self.smoothing, num_perturbations=self.inner_num_perturbations)


@dataclass(frozen=True, eq=False)
class GradientReport:
    estimate: np.ndarray
    method: GradientMethod
    samples_used: int
    exact_error: Optional[float] = None


class CostOracle(abc.ABC):
    """Evaluates the cost of a batch of gains on one task, one RngStream per gain."""

    @abc.abstractmethod
    def costs(self, task: LqrTask, gains: np.ndarray, horizon: int, streams: Sequence[RngStream]) -> np.ndarray:
        """
        :param task: LqrTask the gains act on
        :param gains: array of shape (n, k, d)
        :param horizon: rollout length
        :param streams: n RngStreams, one per gain

        :return: array of n costs

        :raises DivergenceError: with perturbation_index set to the row of the offending gain
        """
        pass


class RolloutCostOracle(CostOracle):
    """The model-free oracle: one simulated rollout of length horizon per gain."""

    def costs(self, task, gains, horizon, streams):
        return np.array([result.empirical_cost for result in rollout_batch(task, gains, horizon, streams)])


class ExactCostOracle(CostOracle):
    """Exact average costs J(K); the streams and horizon are ignored. Unstable gains raise InstabilityError."""

    def __init__(self, opts: SolverOptions = DEFAULT_SOLVER_OPTIONS):
        self.opts = opts

    def costs(self, task, gains, horizon, streams):
        return np.array([evaluate_policy(task, K, self.opts).cost for K in gains])


class FunctionCostOracle(CostOracle):
    """Any deterministic function of the gain, e.g. a linear test function <C, K>."""

    def __init__(self, function: Callable[[np.ndarray], float]):
        self.function = function

    def costs(self, task, gains, horizon, streams):
        return np.array([float(self.function(K)) for K in gains])


DEFAULT_COST_ORACLE = RolloutCostOracle()


def sample_sphere(rows: int, cols: int, radius: float, rng: RngStream) -> np.ndarray:
    """A rows x cols matrix drawn uniformly from the Frobenius sphere of the given radius."""
    if rows < 1 or cols < 1:
        raise ArgumentError(f"sphere dimensions must be positive, got {(rows, cols)}")
    if not radius > 0:
        raise ArgumentError(f"radius must be positive, got {radius}")
    generator = rng.generator()
    direction = generator.standard_normal((rows, cols))
    norm = frobenius_norm(direction)
    while norm == 0.0:
        direction = generator.standard_normal((rows, cols))
        norm = frobenius_norm(direction)
    return radius * (direction / norm)


def _sample_directions(task: LqrTask, params: SmoothingParams, stream: RngStream) -> np.ndarray:
    return np.stack([sample_sphere(task.control_dim, task.state_dim, params.radius,
                                   stream.derive(m, StreamPurpose.SPHERE))
                     for m in range(params.num_perturbations)])


def _oracle_costs(oracle: CostOracle, task: LqrTask, gains: np.ndarray, horizon: int,
                  streams: Sequence[RngStream], perturbations: int, by_base: bool = False) -> np.ndarray:
    """
    Evaluate the oracle on rows laid out as base * perturbations + m.

    A divergence is reported against m, or against the base when by_base is set.
    """
    try:
        return oracle.costs(task, gains, horizon, streams)
    except DivergenceError as error:
        row = error.perturbation_index or 0
        raise DivergenceError(str(error), step=error.step, task_index=error.task_index,
                              perturbation_index=row // perturbations if by_base else row % perturbations) from error


def _sphere_average(task: LqrTask, params: SmoothingParams, directions: np.ndarray, plus: np.ndarray,
                    minus: Optional[np.ndarray]) -> np.ndarray:
    """(1/M) sum_m c_m U_m with c_m = (dk/r^2) J(K + U_m), or (dk/2r^2)(J(K + U_m) - J(K - U_m))."""
    dimension = task.state_dim * task.control_dim
    if minus is None:
        values = (dimension / params.radius ** 2) * plus
    else:
        values = (dimension / (2.0 * params.radius ** 2)) * (plus - minus)
    flat = directions.reshape(len(directions), -1)
    # Summed in perturbation order so the result does not depend on how the work was scheduled
    return (np.sum(values[:, None] * flat, axis=0) / len(directions)).reshape(directions.shape[1:])


def _perturbation_estimates(task: LqrTask, base_gains: np.ndarray, params: SmoothingParams,
                            streams: Sequence[RngStream], oracle: CostOracle) -> np.ndarray:
    """Sphere gradient estimates at several base gains at once, base b drawing from streams[b]."""
    count, M = len(base_gains), params.num_perturbations
    directions = np.stack([_sample_directions(task, params, stream) for stream in streams])
    rollout_streams = [stream.derive(m, StreamPurpose.ROLLOUT) for stream in streams for m in range(M)]
    plus = _oracle_costs(oracle, task, (base_gains[:, None] + directions).reshape((-1,) + base_gains.shape[1:]),
                         params.horizon, rollout_streams, M, count > 1).reshape(count, M)
    minus = None
    if params.estimator is EstimatorKind.TWO_POINT:
        # Both sides of a pair share their rollout noise
        minus = _oracle_costs(oracle, task,
                              (base_gains[:, None] - directions).reshape((-1,) + base_gains.shape[1:]),
                              params.horizon, rollout_streams, M, count > 1).reshape(count, M)
    return np.stack([_sphere_average(task, params, directions[b], plus[b], None if minus is None else minus[b])
                     for b in range(count)])


def estimate_gradient(task: LqrTask, K, p: SmoothingParams, rng: RngStream, oracle: Optional[CostOracle] = None,
                      task_index: Optional[int] = None,
                      opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> GradientReport:
    """
    Zeroth-order estimate (1/M) sum_m (dk/r^2) J~(K + U_m) U_m of grad J(K).

    Perturbation m draws its direction from rng.derive(m, SPHERE) and its rollout from rng.derive(m, ROLLOUT),
      so a fixed rng always replays the same estimate.

    :param task: LqrTask whose cost is perturbed
    :param K: k x d gain, need not be stabilizing
    :param p: SmoothingParams (radius, M, horizon and estimator kind)
    :param rng: RngStream the per-perturbation streams are derived from
    :param oracle: CostOracle, rollouts by default
    :param task_index: reported in errors

    :return: GradientReport, with exact_error when K stabilizes the task

    :raises DivergenceError: if a rollout diverges, with the perturbation index
    """
    oracle = DEFAULT_COST_ORACLE if oracle is None else oracle
    K = task.check_gain(K)
    try:
        estimate = _perturbation_estimates(task, K[None], p, [rng], oracle)[0]
    except DivergenceError as error:
        raise DivergenceError(f"gradient estimation diverged: {error}", step=error.step, task_index=task_index,
                              perturbation_index=error.perturbation_index) from error
    exact_error = None
    if is_stable(task, K):
        exact_error = frobenius_norm(estimate - exact_gradient(task, K, opts))
    return GradientReport(estimate=estimate, method=GradientMethod.ZEROTH_ORDER,
                          samples_used=p.num_perturbations * p.evaluations_per_perturbation,
                          exact_error=exact_error)


def exact_smoothed_gradient(task: LqrTask, K, radius: float, num_samples: int, rng: RngStream,
                            opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> np.ndarray:
    """
    Monte-Carlo value of the smoothed gradient (dk/r^2) E[J(K + U) U] on exact costs, free of rollout noise.

    Uses the antithetic pair, so K +- U must stabilize the task for every draw.
    """
    params = SmoothingParams(radius=radius, num_perturbations=num_samples, horizon=1,
                             estimator=EstimatorKind.TWO_POINT)
    return estimate_gradient(task, K, params, rng, ExactCostOracle(opts), opts=opts).estimate


def _adapted_costs(task: LqrTask, K: np.ndarray, directions: np.ndarray, eta: float, cfg: MetaConfig,
                   inner_streams: Sequence[RngStream], rollout_streams: Sequence[RngStream],
                   oracle: CostOracle) -> np.ndarray:
    """J~(K_m - eta grad~J(K_m)) at K_m = K + directions[m], with one rollout per m."""
    perturbed = K[None] + directions
    inner = _perturbation_estimates(task, perturbed, cfg.inner_smoothing, inner_streams, oracle)
    adapted = perturbed - eta * inner
    return _oracle_costs(oracle, task, adapted, cfg.smoothing.horizon, rollout_streams, len(adapted))


def _batch_position_estimate(task: LqrTask, K: np.ndarray, cfg: MetaConfig, stream: RngStream,
                             oracle: CostOracle) -> np.ndarray:
    params = cfg.smoothing
    if cfg.adaptation_rate == 0:
        return _perturbation_estimates(task, K[None], params, [stream], oracle)[0]

    M = params.num_perturbations
    directions = _sample_directions(task, params, stream)
    inner_streams = [stream.derive(m, StreamPurpose.INNER_ESTIMATE) for m in range(M)]
    rollout_streams = [stream.derive(m, StreamPurpose.ROLLOUT) for m in range(M)]
    plus = _adapted_costs(task, K, directions, cfg.adaptation_rate, cfg, inner_streams, rollout_streams, oracle)
    minus = None
    if params.estimator is EstimatorKind.TWO_POINT:
        minus = _adapted_costs(task, K, -directions, cfg.adaptation_rate, cfg, inner_streams, rollout_streams, oracle)
    return _sphere_average(task, params, directions, plus, minus)


def sample_task_batch(tasks: TaskSet, batch_size: int, rng: RngStream) -> np.ndarray:
    """Task indices drawn with replacement from the prior."""
    generator = rng.derive(0, StreamPurpose.TASK_BATCH).generator()
    return generator.choice(len(tasks), size=batch_size, replace=True, p=tasks.weights)


def estimate_meta_gradient(tasks: TaskSet, K, cfg: MetaConfig, rng: RngStream, oracle: Optional[CostOracle] = None,
                           report_exact_error: bool = True,
                           opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> GradientReport:
    """
    Hessian-free estimate of the meta-gradient grad L(K).

    For every task in a batch drawn from the prior and every outer perturbation U_m:
      K_m = K + U_m, K_im = K_m - eta grad~J_i(K_m) with its own inner perturbations,
      one rollout of K_im gives J~_i(K_im), and (dk/r^2) J~_i(K_im) U_m is averaged over m and the batch.
    With adaptation_rate 0 the inner step is skipped and this is the batch-averaged estimate_gradient at K.

    Batch position b draws from rng.derive(1, b); positions may be computed in parallel (cfg.workers) and are
      reduced in position order.

    :raises DivergenceError: if a rollout diverges, naming the task and the outer perturbation index
    """
    oracle = DEFAULT_COST_ORACLE if oracle is None else oracle
    tasks = as_task_set(tasks)
    K = tasks[0].check_gain(K)
    batch = sample_task_batch(tasks, cfg.task_batch_size, rng)

    def position_estimate(position: int) -> np.ndarray:
        task_index = int(batch[position])
        try:
            return _batch_position_estimate(tasks[task_index], K, cfg, rng.derive(1, position), oracle)
        except DivergenceError as error:
            raise DivergenceError(f"meta-gradient estimation diverged on task {task_index}, perturbation "
                                  f"{error.perturbation_index}: {error}", step=error.step, task_index=task_index,
                                  perturbation_index=error.perturbation_index) from error

    if cfg.workers > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            estimates = list(executor.map(position_estimate, range(len(batch))))
    else:
        estimates = [position_estimate(position) for position in range(len(batch))]

    total = np.zeros_like(K)
    for estimate in estimates:
        total += estimate
    estimate = total / len(batch)
    logger.debug("Meta-gradient estimated on task batch %s", batch.tolist())

    params = cfg.smoothing
    samples = params.num_perturbations * params.evaluations_per_perturbation
    if cfg.adaptation_rate > 0:
        samples *= cfg.inner_smoothing.num_perturbations * cfg.inner_smoothing.evaluations_per_perturbation + 1
    exact_error = None
    if report_exact_error:
        try:
            exact_error = frobenius_norm(estimate - exact_meta_gradient(tasks, K, cfg.adaptation_rate, opts))
        except InstabilityError:
            pass
    return GradientReport(estimate=estimate, method=GradientMethod.ZEROTH_ORDER, samples_used=samples * len(batch),
                          exact_error=exact_error)


def average_cost_difference_ratio(gaps: Sequence[float], optimal_costs: Sequence[float]) -> float:
    """sum_i (J_i(K) - J_i(K*_i)) / sum_i J_i(K*_i)."""
    return float(math.fsum(gaps) / math.fsum(optimal_costs))


@dataclass(frozen=True, eq=False)
class IterationRecord:
    iteration: int
    policy: np.ndarray
    meta_gradient_norm: float
    gaps: tuple[float, ...]
    ratio: float
    wall_seconds: float
    maml_stabilizing: Optional[tuple[bool, ...]] = None
    meta_objective: float = math.nan
    estimate_error: float = math.nan

    @property
    def violation(self) -> bool:
        return self.maml_stabilizing is not None and not all(self.maml_stabilizing)


@dataclass
class LearningTrace:
    """
    Per-iteration records of a meta policy optimization run.

    The record of iteration n describes the policy K_n and the norm of the meta-gradient estimated at K_n;
      the last record of a run that exhausted its budget carries no gradient (NaN norm).
    """
    optimal_costs: tuple[float, ...]
    records: list[IterationRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ratios(self) -> np.ndarray:
        return np.array([record.ratio for record in self.records])

    @property
    def violations(self) -> list[int]:
        return [record.iteration for record in self.records if record.violation]

    @property
    def final_policy(self) -> np.ndarray:
        return self.records[-1].policy


def _optimality_gaps(tasks: TaskSet, K: np.ndarray, optimal_costs: Sequence[float],
                     opts: SolverOptions) -> tuple[float, ...]:
    gaps = []
    for task, optimal_cost in zip(tasks, optimal_costs):
        if is_stable(task, K):
            gaps.append(evaluate_policy(task, K, opts).cost - optimal_cost)
        else:
            gaps.append(math.inf)
    return tuple(gaps)


def _first_violation(flags: Sequence[bool], tasks: TaskSet, K: np.ndarray) -> tuple[int, str]:
    index = next(i for i, flag in enumerate(flags) if not flag)
    return index, 'policy' if not is_stable(tasks[index], K) else 'adapted'


def run_meta_optimization(tasks: TaskSet, K0, cfg: MetaConfig,
                          mode: OptimizationMode = OptimizationMode.ZEROTH_ORDER,
                          oracle: Optional[CostOracle] = None,
                          on_record: Optional[Callable[[IterationRecord], None]] = None,
                          opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> LearningTrace:
    """
    Meta policy optimization K_{n+1} = K_n - alpha grad~L(K_n), started from a MAML-stabilizing K0.

    The loop runs while the estimated meta-gradient norm is above cfg.tolerance and at most cfg.max_iterations
      gradient steps are taken. Iteration n draws all of its randomness from RngStream(cfg.seed, (n,)).

    :param tasks: TaskSet to meta-train on
    :param K0: initial policy, must be MAML-stabilizing at cfg.adaptation_rate
    :param cfg: MetaConfig
    :param mode: ZEROTH_ORDER estimates the meta-gradient from rollouts, EXACT_ORACLE uses the model-based one
    :param oracle: CostOracle of the zeroth-order estimator, rollouts by default
    :param on_record: called with every IterationRecord as soon as it exists, e.g. to flush a trace file

    :return: the LearningTrace of the run

    :raises InstabilityError: if K0 is not MAML-stabilizing
    :raises StabilityViolationError: if a later iterate is not MAML-stabilizing (with cfg.check_stability and
      cfg.stop_on_violation), carrying the trace up to and including the offending iteration
    :raises DivergenceError: propagated from the rollouts
    """
    tasks = as_task_set(tasks)
    K = tasks[0].check_gain(K0, "K0")
    eta = cfg.adaptation_rate
    flags = check_maml_stabilizing(tasks, K, eta, opts)
    if not all(flags):
        index, condition = _first_violation(flags, tasks, K)
        raise InstabilityError(f"initial policy is not MAML-stabilizing: {condition} condition fails on task {index}",
                               task_index=index, condition=condition, iteration=0)

    optimal_costs = tuple(optimal_policy(task, opts)[1] for task in tasks)
    trace = LearningTrace(optimal_costs=optimal_costs)
    logger.info("Meta optimization of %d tasks (d=%d, k=%d) in %s mode for at most %d iterations",
                len(tasks), tasks.state_dim, tasks.control_dim, mode.value, cfg.max_iterations)
    start = time.perf_counter()

    for n in range(cfg.max_iterations + 1):
        if cfg.check_stability and n > 0:
            flags = check_maml_stabilizing(tasks, K, eta, opts)
        stabilizing = all(flags) or not cfg.check_stability

        gradient = None
        estimate_error = math.nan
        if n < cfg.max_iterations and (stabilizing or not cfg.stop_on_violation):
            if mode is OptimizationMode.EXACT_ORACLE:
                gradient = exact_meta_gradient(tasks, K, eta, opts)
            else:
                report = estimate_meta_gradient(tasks, K, cfg, RngStream(cfg.seed, (n,)), oracle,
                                                cfg.report_exact_error, opts)
                gradient = report.estimate
                if report.exact_error is not None:
                    estimate_error = report.exact_error

        try:
            objective = meta_objective(tasks, K, eta, opts)
        except InstabilityError:
            objective = math.nan
        gaps = _optimality_gaps(tasks, K, optimal_costs, opts)
        record = IterationRecord(
            iteration=n,
            policy=K.copy(),
            meta_gradient_norm=math.nan if gradient is None else frobenius_norm(gradient),
            gaps=gaps,
            ratio=average_cost_difference_ratio(gaps, optimal_costs),
            wall_seconds=time.perf_counter() - start,
            maml_stabilizing=tuple(flags) if cfg.check_stability else None,
            meta_objective=objective,
            estimate_error=estimate_error,
        )
        trace.records.append(record)
        if on_record is not None:
            on_record(record)
        if n % cfg.log_every == 0:
            logger.info("Iteration %d: ratio %.6e, meta-gradient norm %.6e", n, record.ratio,
                        record.meta_gradient_norm)

        if record.violation:
            index, condition = _first_violation(flags, tasks, K)
            logger.warning("Iteration %d left the MAML-stabilizing set (%s condition, task %d)", n, condition, index)
            if cfg.stop_on_violation:
                raise StabilityViolationError(f"policy at iteration {n} is not MAML-stabilizing: {condition} "
                                              f"condition fails on task {index}", iteration=n, trace=trace,
                                              task_index=index, condition=condition)
        if gradient is None or record.meta_gradient_norm <= cfg.tolerance:
            break
        K = K - cfg.learning_rate * gradient

    logger.info("Meta optimization stopped after %d iterations with ratio %.6e", trace.records[-1].iteration,
                trace.records[-1].ratio)
    return trace
