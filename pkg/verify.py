"""
Cross-oracle property suites: finite differences against the exact gradients, estimators against the exact
oracles, cost-formula consistency, gradient domination and the formula diagnostics.

Every suite is deterministic given its seed and returns PropertyResults; nothing here raises on a failed property.
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from config import TaskGenSpec, VerifySpec
from linalg import frobenius_norm, spectral_radius
from lqr_core import LqrTask, TaskSet, evaluate_policy, exact_gradient, exact_hessian_action, exact_meta_gradient, \
    is_stable, meta_objective, optimal_policy
from rollout_sim import RngStream, StreamPurpose, expected_finite_horizon, rollout, rollout_batch
from task_data.GeneratedTaskSource import GeneratedTaskSource
from theory_diag import CovarianceFloor, bernstein_sample_size, check_gradient_domination, \
    check_maml_stabilizing, gradient_domination_constant, joint_stability_scan, rollout_length_bound, trust_radius
from zoo_meta import ExactCostOracle, MetaConfig, SmoothingParams, estimate_gradient, estimate_meta_gradient

logger = logging.getLogger(__name__)

REFERENCE_TASK = LqrTask(A=[[0.9]], B=[[1.0]], Q=[[1.0]], R=[[1.0]], Psi=[[1.0]], Sigma0=[[1.0]])
REFERENCE_GAIN = np.array([[0.5]])
FINITE_DIFFERENCE_TOLERANCE = 1e-4
COST_IDENTITY_TOLERANCE = 1e-8
RICCATI_GRADIENT_TOLERANCE = 1e-7
MAX_RANDOM_DIM = 4
GAINS_PER_TASK = 100
ROLLOUT_LENGTH_EPSILON = 0.1
# Finite differences lose accuracy close to the stability boundary
MAX_CLOSED_LOOP_RADIUS = 0.95


@dataclass(frozen=True)
class PropertyResult:
    suite: str
    property: str
    passed: bool
    measured: float = math.nan
    threshold: float = math.nan
    detail: str = ''


def _stream(seed: int, suite: int, *parts: int) -> RngStream:
    return RngStream(seed, (int(StreamPurpose.VERIFICATION), suite) + parts)


def random_task(d: int, k: int, seed: int) -> LqrTask:
    return GeneratedTaskSource.generate_tasks(TaskGenSpec(d=d, k=k, num_tasks=1, seed=seed))[0]


def random_stable_gain(task: LqrTask, generator: np.random.Generator, scale: float = 0.5,
                       eta: float = 0.0) -> np.ndarray:
    """
    K* plus a Gaussian offset, halved until the gain is MAML-stabilizing at eta with a closed-loop spectral radius
      of at most MAX_CLOSED_LOOP_RADIUS
    """
    K_star, _ = optimal_policy(task)
    offset = scale * generator.standard_normal(K_star.shape)
    for _ in range(60):
        K = K_star + offset
        if spectral_radius(task.closed_loop(K)) <= MAX_CLOSED_LOOP_RADIUS \
                and all(check_maml_stabilizing(task, K, eta)):
            return K
        offset = offset / 2
    return K_star


def central_difference(function: Callable[[np.ndarray], float], K: np.ndarray, step: float) -> np.ndarray:
    gradient = np.zeros_like(K)
    for index in np.ndindex(K.shape):
        direction = np.zeros_like(K)
        direction[index] = step
        gradient[index] = (function(K + direction) - function(K - direction)) / (2 * step)
    return gradient


def _relative_error(approximation: np.ndarray, exact: np.ndarray) -> float:
    return frobenius_norm(approximation - exact) / max(1.0, frobenius_norm(exact))


def _random_pairs(spec: VerifySpec, seed: int, eta: float):
    for j in range(spec.num_random_pairs):
        generator = _stream(seed, 1, j).generator()
        d, k = (int(value) for value in generator.integers(1, MAX_RANDOM_DIM + 1, size=2))
        task = random_task(d, k, int(generator.integers(2 ** 63)))
        yield task, random_stable_gain(task, generator, eta=eta), generator


def lqr_core_suite(spec: VerifySpec, seed: int) -> list[PropertyResult]:
    """Exact oracles against central differences, Hessian self-adjointness, the cost identity and Riccati optimality."""
    eta = spec.meta_adaptation_rate
    step = spec.finite_difference_step
    errors = {'gradient': 0.0, 'hessian': 0.0, 'hessian_symmetry': 0.0, 'meta_gradient': 0.0, 'cost_identity': 0.0,
              'riccati': 0.0}
    for task, K, generator in _random_pairs(spec, seed, eta):
        errors['gradient'] = max(errors['gradient'], _relative_error(
            central_difference(lambda X: evaluate_policy(task, X).cost, K, step), exact_gradient(task, K)))

        direction = generator.standard_normal(K.shape)
        direction /= frobenius_norm(direction)
        directional = (exact_gradient(task, K + step * direction) - exact_gradient(task, K - step * direction)) \
            / (2 * step)
        errors['hessian'] = max(errors['hessian'],
                                _relative_error(directional, exact_hessian_action(task, K, direction)))
        other = generator.standard_normal(K.shape)
        forward = float(np.sum(exact_hessian_action(task, K, direction) * other))
        backward = float(np.sum(direction * exact_hessian_action(task, K, other)))
        errors['hessian_symmetry'] = max(errors['hessian_symmetry'], abs(forward - backward) / max(1.0, abs(forward)))

        errors['meta_gradient'] = max(errors['meta_gradient'], _relative_error(
            central_difference(lambda X: meta_objective(task, X, eta), K, step), exact_meta_gradient(task, K, eta)))

        evaluation = evaluate_policy(task, K)
        errors['cost_identity'] = max(errors['cost_identity'],
                                      abs(evaluation.cost - evaluation.gramian_cost) / evaluation.cost)

        K_star, _ = optimal_policy(task)
        errors['riccati'] = max(errors['riccati'], frobenius_norm(exact_gradient(task, K_star)))

    thresholds = {'gradient': FINITE_DIFFERENCE_TOLERANCE, 'hessian': FINITE_DIFFERENCE_TOLERANCE,
                  'hessian_symmetry': COST_IDENTITY_TOLERANCE,
                  'meta_gradient': FINITE_DIFFERENCE_TOLERANCE, 'cost_identity': COST_IDENTITY_TOLERANCE,
                  'riccati': RICCATI_GRADIENT_TOLERANCE}
    return [PropertyResult('lqr_core', name, errors[name] <= thresholds[name], errors[name], thresholds[name],
                           f"worst case over {spec.num_random_pairs} random (task, K) pairs")
            for name in errors]


def rollout_sim_suite(spec: VerifySpec, seed: int) -> list[PropertyResult]:
    """Monte-Carlo rollout means against the exact finite-horizon expectation, and batch independence."""
    horizon, count = 20, 2000
    streams = [_stream(seed, 2, i) for i in range(count)]
    costs = np.array([result.empirical_cost for result in rollout_batch(REFERENCE_TASK, REFERENCE_GAIN, horizon,
                                                                         streams)])
    expected, _ = expected_finite_horizon(REFERENCE_TASK, REFERENCE_GAIN, horizon)
    standard_error = float(np.std(costs, ddof=1)) / math.sqrt(count)
    deviation = abs(float(np.mean(costs)) - expected)

    single = rollout(REFERENCE_TASK, REFERENCE_GAIN, horizon, streams[3])
    batch_independent = single.empirical_cost == costs[3]
    return [
        PropertyResult('rollout_sim', 'mean_cost_matches_expectation', deviation <= 5 * standard_error, deviation,
                       5 * standard_error, f"{count} rollouts of length {horizon}"),
        PropertyResult('rollout_sim', 'batch_independence', bool(batch_independent),
                       detail="a rollout simulated alone equals the same rollout inside a batch"),
    ]


def zoo_meta_suite(spec: VerifySpec, seed: int) -> list[PropertyResult]:
    """Zeroth-order estimators against the exact gradient and meta-gradient on the scalar reference task."""
    gradient_params = SmoothingParams(radius=spec.gradient_radius, num_perturbations=spec.gradient_perturbations,
                                      horizon=1, estimator=spec.estimator)
    gradient_errors = [
        estimate_gradient(REFERENCE_TASK, REFERENCE_GAIN, gradient_params, _stream(seed, 3, rep),
                          ExactCostOracle()).exact_error
        for rep in range(spec.repetitions)
    ]

    cfg = MetaConfig(
        adaptation_rate=spec.meta_adaptation_rate,
        smoothing=SmoothingParams(radius=spec.meta_radius, num_perturbations=spec.meta_perturbations,
                                  horizon=spec.meta_horizon, estimator=spec.estimator),
        task_batch_size=1,
        inner_num_perturbations=spec.meta_inner_perturbations,
    )
    tasks = TaskSet((REFERENCE_TASK,))
    meta_errors = [estimate_meta_gradient(tasks, REFERENCE_GAIN, cfg, _stream(seed, 4, rep)).exact_error
                   for rep in range(spec.repetitions)]

    first = estimate_meta_gradient(tasks, REFERENCE_GAIN, cfg, _stream(seed, 5)).estimate
    second = estimate_meta_gradient(tasks, REFERENCE_GAIN, cfg, _stream(seed, 5)).estimate

    results = []
    for name, errors, tolerance, required in (
            ('gradient_estimate_accuracy', gradient_errors, spec.gradient_tolerance, spec.gradient_pass_fraction),
            ('meta_gradient_estimate_accuracy', meta_errors, spec.meta_tolerance, spec.pass_fraction)):
        fraction = float(np.mean([error <= tolerance for error in errors]))
        results.append(PropertyResult('zoo_meta', name, fraction >= required, fraction, required,
                                      f"fraction of {len(errors)} repetitions within {tolerance}, worst error "
                                      f"{max(errors):.3e}"))
    results.append(PropertyResult('zoo_meta', 'seed_reproducibility', bool(np.array_equal(first, second)),
                                  detail="two estimates from the same stream are bit-identical"))
    return results


def _reference_lambda() -> float:
    # Scalar Riccati fixed point P^2 - 0.81 P - 1 = 0 and 1 / Sigma_{K*} = 1 - (A - K*)^2
    P = (0.81 + math.sqrt(0.81 ** 2 + 4.0)) / 2.0
    K_star = 0.9 * P / (1.0 + P)
    return 1.0 - (0.9 - K_star) ** 2


def _unit_covariance_task(task: LqrTask) -> LqrTask:
    d = task.state_dim
    return LqrTask(A=task.A, B=task.B, Q=task.Q, R=task.R, Psi=np.eye(d), Sigma0=np.eye(d))


def theory_diag_suite(spec: VerifySpec, seed: int) -> list[PropertyResult]:
    """Gradient domination, trust radius, rollout-length bound and the documented formula values."""
    counterexamples = 0
    unstable_perturbations = 0
    rollout_length_misses = 0
    worst_rollout_gap = 0.0
    for t in range(spec.num_random_tasks):
        generator = _stream(seed, 6, t).generator()
        d, k = (int(value) for value in generator.integers(1, MAX_RANDOM_DIM + 1, size=2))
        task = random_task(d, k, int(generator.integers(2 ** 63)))
        if t < 10:
            gains = [random_stable_gain(task, generator, scale=float(generator.uniform(0.05, 2.0)))
                     for _ in range(GAINS_PER_TASK)]
            counterexamples += len(check_gradient_domination(task, gains, CovarianceFloor.NOISE, t))

        K = random_stable_gain(task, generator)
        radius = trust_radius(task, K, CovarianceFloor.NOISE)
        for _ in range(GAINS_PER_TASK):
            direction = generator.standard_normal(K.shape)
            delta = radius * float(generator.uniform()) * direction / frobenius_norm(direction)
            unstable_perturbations += not is_stable(task, K + delta)

        unit_task = _unit_covariance_task(task)
        K_star, optimal_cost = optimal_policy(unit_task)
        horizon = rollout_length_bound(unit_task, K_star, ROLLOUT_LENGTH_EPSILON)
        gap = abs(expected_finite_horizon(unit_task, K_star, horizon)[0] - optimal_cost)
        worst_rollout_gap = max(worst_rollout_gap, gap)
        rollout_length_misses += gap > ROLLOUT_LENGTH_EPSILON

    scan = joint_stability_scan(
        [LqrTask(A=[[3.0]], B=[[4.0]], Q=[[1.0]], R=[[1.0]], Psi=[[1.0]], Sigma0=[[1.0]]),
         LqrTask(A=[[1.0]], B=[[-1.0]], Q=[[1.0]], R=[[1.0]], Psi=[[1.0]], Sigma0=[[1.0]])],
        [[[value]] for value in np.arange(-3000, 3001) / 1000])

    hand_values = (
        ('bernstein_sample_size', bernstein_sample_size(1, 1, 1.0, 1.0, 0.5, 0.1), 28, 0.0),
        ('rollout_length_bound', rollout_length_bound(REFERENCE_TASK, REFERENCE_GAIN, 0.1), 28, 0.0),
        ('trust_radius', trust_radius(REFERENCE_TASK, REFERENCE_GAIN), 0.12, 1e-5),
        ('gradient_domination_constant', gradient_domination_constant(REFERENCE_TASK), _reference_lambda(), 1e-8),
    )
    results = [
        PropertyResult('theory_diag', 'gradient_domination', counterexamples == 0, counterexamples, 0,
                       f"counterexamples among {min(10, spec.num_random_tasks) * GAINS_PER_TASK} stable gains"),
        PropertyResult('theory_diag', 'trust_radius_keeps_stability', unstable_perturbations == 0,
                       unstable_perturbations, 0, "unstable gains within the trust radius"),
        PropertyResult('theory_diag', 'rollout_length_bound_sufficient', rollout_length_misses == 0,
                       worst_rollout_gap, ROLLOUT_LENGTH_EPSILON, "worst finite-horizon gap at the bound"),
        PropertyResult('theory_diag', 'non_meta_learnable_pair', bool(np.all(~np.all(scan, axis=1))),
                       detail="no scalar gain in [-3, 3] stabilizes both tasks"),
    ]
    for name, value, expected, tolerance in hand_values:
        error = abs(value - expected)
        results.append(PropertyResult('theory_diag', f'{name}_documented_value', error <= tolerance, float(value),
                                      float(expected)))
    return results


def task_set_suite(tasks: TaskSet, eta: float, spec: VerifySpec) -> list[PropertyResult]:
    """Properties of the experiment's own task set at the zero gain."""
    K0 = np.zeros((tasks.control_dim, tasks.state_dim))
    flags = check_maml_stabilizing(tasks, K0, eta)
    # Gradients only exist on the tasks K = 0 stabilizes
    stable = [(index, task) for index, task in enumerate(tasks) if is_stable(task, K0)]
    gradient_error = max((_relative_error(central_difference(lambda X: evaluate_policy(task, X).cost, K0,
                                                             spec.finite_difference_step),
                                          exact_gradient(task, K0)) for _, task in stable), default=math.nan)
    counterexamples = sum(len(check_gradient_domination(task, [K0], CovarianceFloor.NOISE, index))
                          for index, task in stable)
    return [
        PropertyResult('task_set', 'zero_gain_maml_stabilizing', all(flags), float(sum(flags)), float(len(tasks)),
                       "tasks for which K = 0 is MAML-stabilizing"),
        PropertyResult('task_set', 'gradient_matches_finite_difference',
                       gradient_error <= FINITE_DIFFERENCE_TOLERANCE, gradient_error, FINITE_DIFFERENCE_TOLERANCE),
        PropertyResult('task_set', 'gradient_domination_at_zero_gain', counterexamples == 0, counterexamples, 0),
    ]


SUITES = {
    'lqr_core': lqr_core_suite,
    'rollout_sim': rollout_sim_suite,
    'zoo_meta': zoo_meta_suite,
    'theory_diag': theory_diag_suite,
}


def run_property_suites(spec: VerifySpec, seed: int, tasks: TaskSet = None, eta: float = 0.0,
                        suites: Sequence[str] = tuple(SUITES)) -> list[PropertyResult]:
    results = []
    for name in suites:
        logger.info("Running the %s property suite", name)
        results.extend(SUITES[name](spec, seed))
    if tasks is not None:
        results.extend(task_set_suite(tasks, eta, spec))
    for result in results:
        if not result.passed:
            logger.warning("Property %s.%s failed: measured %s, threshold %s", result.suite, result.property,
                           result.measured, result.threshold)
    return results


def results_to_frame(results: Sequence[PropertyResult]) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(result) for result in results],
                         columns=['suite', 'property', 'passed', 'measured', 'threshold', 'detail'])
    return frame.astype({'passed': bool, 'measured': float, 'threshold': float})
