import unittest
from dataclasses import replace

import numpy as np

from exceptions import ArgumentError, DivergenceError, InstabilityError, StabilityViolationError
from lqr_core import LqrTask, TaskSet, evaluate_policy, exact_gradient, exact_meta_gradient
from rollout_sim import RngStream, StreamPurpose
from zoo_meta import CostOracle, EstimatorKind, ExactCostOracle, FunctionCostOracle, GradientMethod, MetaConfig, \
    OptimizationMode, SmoothingParams, average_cost_difference_ratio, estimate_gradient, estimate_meta_gradient, \
    exact_smoothed_gradient, run_meta_optimization, sample_sphere, sample_task_batch


def scalar_task(A: float = 0.9, B: float = 1.0) -> LqrTask:
    return LqrTask(A=[[A]], B=[[B]], Q=[[1.0]], R=[[1.0]], Psi=[[1.0]], Sigma0=[[1.0]])


def matrix_task(k: int = 2, d: int = 3) -> LqrTask:
    return LqrTask(A=0.5 * np.eye(d), B=np.ones((d, k)), Q=np.eye(d), R=np.eye(k), Psi=np.eye(d), Sigma0=np.eye(d))


class DivergingOracle(CostOracle):
    """Unit costs, except that the given gain diverges."""

    def __init__(self, diverging: np.ndarray):
        self.diverging = diverging

    def costs(self, task, gains, horizon, streams):
        for row, K in enumerate(gains):
            if np.allclose(K, self.diverging):
                raise DivergenceError("rollout diverged at step 1", step=1, perturbation_index=row)
        return np.ones(len(gains))


class TestSmoothingParams(unittest.TestCase):
    def test_validation(self):
        with self.assertRaises(ArgumentError):
            SmoothingParams(radius=0.0)
        with self.assertRaises(ArgumentError):
            SmoothingParams(num_perturbations=0)
        with self.assertRaises(ArgumentError):
            SmoothingParams(horizon=0)
        self.assertIs(EstimatorKind.TWO_POINT, SmoothingParams(estimator='two_point').estimator)
        self.assertEqual(2, SmoothingParams(estimator=EstimatorKind.TWO_POINT).evaluations_per_perturbation)

    def test_meta_config(self):
        with self.assertRaises(ArgumentError):
            MetaConfig(learning_rate=0.0)
        with self.assertRaises(ArgumentError):
            MetaConfig(adaptation_rate=-1e-3)
        with self.assertRaises(ArgumentError):
            MetaConfig(workers=0)
        cfg = MetaConfig(smoothing=SmoothingParams(num_perturbations=100), inner_num_perturbations=7)
        self.assertEqual(7, cfg.inner_smoothing.num_perturbations)
        self.assertEqual(100, MetaConfig().inner_smoothing.num_perturbations)


class TestSampleSphere(unittest.TestCase):
    def test_radius_and_reproducibility(self):
        first = sample_sphere(2, 3, 0.3, RngStream(4, (1,)))
        self.assertEqual((2, 3), first.shape)
        self.assertAlmostEqual(0.3, np.linalg.norm(first), places=12)
        np.testing.assert_array_equal(first, sample_sphere(2, 3, 0.3, RngStream(4, (1,))))

    def test_validation(self):
        with self.assertRaises(ArgumentError):
            sample_sphere(0, 3, 0.3, RngStream(0))
        with self.assertRaises(ArgumentError):
            sample_sphere(2, 3, -0.3, RngStream(0))


class TestEstimateGradient(unittest.TestCase):
    def setUp(self) -> None:
        self.task = scalar_task()
        self.K = np.array([[0.5]])

    def _linear_tolerance(self, C: np.ndarray, M: int) -> np.ndarray:
        # Per-entry standard deviation of (n / r^2) <C, U> U for U uniform on the sphere, n = C.size
        n = C.size
        return 5.0 * np.sqrt(n * (np.sum(C ** 2) + 2.0 * C ** 2) / ((n + 2) * M))

    def test_unbiased_on_linear_function(self):
        C = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]])
        oracle = FunctionCostOracle(lambda K: float(np.sum(C * K)))
        M = 20_000
        for estimator, K in ((EstimatorKind.ONE_POINT, np.zeros((2, 3))),
                             (EstimatorKind.TWO_POINT, np.full((2, 3), 0.7))):
            params = SmoothingParams(radius=0.1, num_perturbations=M, horizon=1, estimator=estimator)
            report = estimate_gradient(matrix_task(), K, params, RngStream(12), oracle)
            self.assertTrue(np.all(np.abs(report.estimate - C) <= self._linear_tolerance(C, M)), estimator)

    def test_one_point_matches_smoothed_gradient(self):
        radius, M = 0.2, 20_000
        params = SmoothingParams(radius=radius, num_perturbations=M, horizon=1)
        report = estimate_gradient(self.task, self.K, params, RngStream(21), ExactCostOracle())
        smoothed = exact_smoothed_gradient(self.task, self.K, radius, 10, RngStream(22))
        plus = evaluate_policy(self.task, self.K + radius).cost
        minus = evaluate_policy(self.task, self.K - radius).cost
        # On a scalar task the sphere is {-r, r}, so the smoothed gradient is a central difference
        self.assertAlmostEqual((plus - minus) / (2 * radius), smoothed[0, 0], places=12)
        variance = (plus ** 2 + minus ** 2) / 2.0 / radius ** 2 - smoothed[0, 0] ** 2
        self.assertLess(abs(report.estimate[0, 0] - smoothed[0, 0]), 5.0 * np.sqrt(variance / M))

    def test_two_point_exact_costs(self):
        params = SmoothingParams(radius=0.01, num_perturbations=100, horizon=1, estimator=EstimatorKind.TWO_POINT)
        report = estimate_gradient(self.task, self.K, params, RngStream(1), ExactCostOracle())
        self.assertIs(GradientMethod.ZEROTH_ORDER, report.method)
        self.assertEqual(200, report.samples_used)
        self.assertLess(report.exact_error, 1e-3)
        self.assertAlmostEqual(-0.226757, report.estimate[0, 0], places=3)

    def test_two_point_rollouts(self):
        params = SmoothingParams(radius=0.05, num_perturbations=500, horizon=2000, estimator=EstimatorKind.TWO_POINT)
        report = estimate_gradient(self.task, self.K, params, RngStream(9))
        self.assertLess(report.exact_error, 0.05)

    def test_reproducible(self):
        params = SmoothingParams(radius=0.05, num_perturbations=20, horizon=30)
        task = matrix_task()
        K = np.zeros((2, 3))
        first = estimate_gradient(task, K, params, RngStream(3, (5,))).estimate
        np.testing.assert_array_equal(first, estimate_gradient(task, K, params, RngStream(3, (5,))).estimate)
        self.assertFalse(np.array_equal(first, estimate_gradient(task, K, params, RngStream(4, (5,))).estimate))

    def test_unstable_gain_has_no_exact_error(self):
        params = SmoothingParams(radius=0.05, num_perturbations=5, horizon=10)
        report = estimate_gradient(self.task, [[-0.5]], params, RngStream(0))
        self.assertIsNone(report.exact_error)

    def test_divergence_names_perturbation(self):
        task = scalar_task(A=3.0)
        params = SmoothingParams(radius=0.05, num_perturbations=3, horizon=1000)
        with self.assertRaises(DivergenceError) as context:
            estimate_gradient(task, [[0.0]], params, RngStream(0), task_index=4)
        self.assertEqual(4, context.exception.task_index)
        self.assertIn(context.exception.perturbation_index, range(3))

    def test_divergence_names_later_perturbation(self):
        task = matrix_task()
        rng = RngStream(3)
        draw = sample_sphere(2, 3, 0.05, rng.derive(5, StreamPurpose.SPHERE))
        for estimator, diverging in ((EstimatorKind.ONE_POINT, draw), (EstimatorKind.TWO_POINT, -draw)):
            params = SmoothingParams(radius=0.05, num_perturbations=8, horizon=10, estimator=estimator)
            with self.assertRaises(DivergenceError) as context:
                estimate_gradient(task, np.zeros((2, 3)), params, rng, DivergingOracle(diverging), task_index=1)
            self.assertEqual(5, context.exception.perturbation_index)
            self.assertEqual(1, context.exception.task_index)


class TestEstimateMetaGradient(unittest.TestCase):
    def setUp(self) -> None:
        self.tasks = TaskSet((scalar_task(0.9), scalar_task(0.7, 1.2), scalar_task(0.5, 0.8)))
        self.K = np.array([[0.3]])

    def test_sample_task_batch(self):
        batch = sample_task_batch(self.tasks, 50, RngStream(1))
        self.assertEqual(50, len(batch))
        self.assertTrue(np.all((0 <= batch) & (batch < 3)))
        np.testing.assert_array_equal(batch, sample_task_batch(self.tasks, 50, RngStream(1)))
        weighted = TaskSet(self.tasks.tasks, [0.0, 1.0, 0.0])
        np.testing.assert_array_equal(np.ones(20), sample_task_batch(weighted, 20, RngStream(1)))

    def test_zero_adaptation_rate_reduces_to_gradient_estimate(self):
        params = SmoothingParams(radius=0.05, num_perturbations=30, horizon=40)
        cfg = MetaConfig(adaptation_rate=0.0, smoothing=params, task_batch_size=1)
        weighted = TaskSet(self.tasks.tasks, [0.0, 1.0, 0.0])
        rng = RngStream(5, (2,))
        meta = estimate_meta_gradient(weighted, self.K, cfg, rng)
        plain = estimate_gradient(self.tasks[1], self.K, params, rng.derive(1, 0))
        np.testing.assert_array_equal(plain.estimate, meta.estimate)

    def test_exact_costs_recover_meta_gradient(self):
        eta = 0.01
        cfg = MetaConfig(adaptation_rate=eta, task_batch_size=30,
                         smoothing=SmoothingParams(radius=0.01, num_perturbations=10, horizon=1,
                                                   estimator=EstimatorKind.TWO_POINT))
        report = estimate_meta_gradient(TaskSet((self.tasks[0],)), self.K, cfg, RngStream(2), ExactCostOracle())
        exact = exact_meta_gradient(self.tasks[0], self.K, eta)
        self.assertLess(np.abs(report.estimate - exact).max(), 5e-3)
        self.assertLess(report.exact_error, 5e-3)

    def test_rollout_meta_gradient(self):
        eta = 0.01
        cfg = MetaConfig(adaptation_rate=eta, task_batch_size=1, inner_num_perturbations=20,
                         smoothing=SmoothingParams(radius=0.01, num_perturbations=200, horizon=2000,
                                                   estimator=EstimatorKind.TWO_POINT))
        report = estimate_meta_gradient(TaskSet((scalar_task(),)), [[0.5]], cfg, RngStream(31))
        self.assertLess(report.exact_error, 0.05)

    def test_samples_used(self):
        cfg = MetaConfig(adaptation_rate=0.01, task_batch_size=2, inner_num_perturbations=3,
                         smoothing=SmoothingParams(radius=0.05, num_perturbations=4, horizon=10))
        report = estimate_meta_gradient(self.tasks, self.K, cfg, RngStream(0), report_exact_error=False)
        self.assertEqual(2 * 4 * (3 + 1), report.samples_used)
        self.assertIsNone(report.exact_error)

    def test_workers_do_not_change_the_estimate(self):
        cfg = MetaConfig(adaptation_rate=0.01, task_batch_size=4, inner_num_perturbations=5,
                         smoothing=SmoothingParams(radius=0.05, num_perturbations=10, horizon=20))
        serial = estimate_meta_gradient(self.tasks, self.K, cfg, RngStream(8)).estimate
        parallel = estimate_meta_gradient(self.tasks, self.K, replace(cfg, workers=3), RngStream(8)).estimate
        np.testing.assert_array_equal(serial, parallel)

    def test_divergence_names_task(self):
        tasks = TaskSet((scalar_task(A=3.0, B=1.0),))
        cfg = MetaConfig(adaptation_rate=0.01, task_batch_size=1,
                         smoothing=SmoothingParams(radius=0.05, num_perturbations=3, horizon=1000))
        with self.assertRaises(DivergenceError) as context:
            estimate_meta_gradient(tasks, [[0.0]], cfg, RngStream(0))
        self.assertEqual(0, context.exception.task_index)


class TestRunMetaOptimization(unittest.TestCase):
    def setUp(self) -> None:
        self.tasks = TaskSet((scalar_task(0.9), scalar_task(0.7, 1.2)))
        self.K0 = np.zeros((1, 1))

    def test_average_cost_difference_ratio(self):
        self.assertAlmostEqual(0.75, average_cost_difference_ratio([1.0, 2.0], [2.0, 2.0]))

    def test_exact_mode_converges(self):
        cfg = MetaConfig(adaptation_rate=0.0, learning_rate=0.01, max_iterations=2000, tolerance=1e-9)
        trace = run_meta_optimization(TaskSet((scalar_task(),)), self.K0, cfg, OptimizationMode.EXACT_ORACLE)
        self.assertLess(trace.records[-1].ratio, 1e-6)
        self.assertLessEqual(trace.records[-1].meta_gradient_norm, 1e-9)
        self.assertLess(trace.records[-1].iteration, 2000)
        self.assertEqual([], trace.violations)

    def test_exact_mode_descends_meta_objective(self):
        cfg = MetaConfig(adaptation_rate=0.01, learning_rate=0.005, max_iterations=50)
        trace = run_meta_optimization(self.tasks, self.K0, cfg, OptimizationMode.EXACT_ORACLE)
        objectives = [record.meta_objective for record in trace.records]
        self.assertEqual(51, len(trace))
        self.assertTrue(all(later <= earlier for earlier, later in zip(objectives, objectives[1:])))
        self.assertTrue(np.isnan(trace.records[-1].meta_gradient_norm))

    def test_exact_mode_converges_on_matrix_task_set(self):
        tasks = TaskSet(tuple(
            LqrTask(A=np.array([[0.5, 0.1], [0.0, 0.5]]) + 1e-4 * index * np.diag([1.0, -1.0]), B=np.eye(2),
                    Q=np.eye(2), R=np.eye(2), Psi=np.eye(2), Sigma0=np.eye(2))
            for index in range(5)
        ))
        cfg = MetaConfig(adaptation_rate=1e-5, learning_rate=0.1, max_iterations=60)
        trace = run_meta_optimization(tasks, np.zeros((2, 2)), cfg, OptimizationMode.EXACT_ORACLE)
        objectives = [record.meta_objective for record in trace.records]
        self.assertTrue(all(later <= earlier for earlier, later in zip(objectives, objectives[1:])))
        self.assertLess(trace.records[-1].ratio, 1e-5)
        self.assertEqual([], trace.violations)

    def test_zeroth_order_run_is_reproducible(self):
        cfg = MetaConfig(adaptation_rate=1e-5, learning_rate=1e-3, max_iterations=5, report_exact_error=True,
                         smoothing=SmoothingParams(radius=0.05, num_perturbations=20, horizon=50))
        seen = []
        first = run_meta_optimization(self.tasks, self.K0, cfg, on_record=seen.append)
        second = run_meta_optimization(self.tasks, self.K0, cfg)
        self.assertEqual(6, len(first))
        self.assertEqual([record.iteration for record in first.records], [record.iteration for record in seen])
        np.testing.assert_array_equal(first.final_policy, second.final_policy)
        np.testing.assert_array_equal(first.ratios, second.ratios)
        self.assertFalse(np.isnan(first.records[0].estimate_error))
        self.assertEqual((True, True), first.records[0].maml_stabilizing)

    def test_unstable_initial_policy(self):
        with self.assertRaises(InstabilityError) as context:
            run_meta_optimization(self.tasks, [[-0.5]], MetaConfig())
        self.assertEqual(0, context.exception.iteration)
        self.assertEqual('policy', context.exception.condition)

    def test_stability_violation_stops_with_trace(self):
        cfg = MetaConfig(adaptation_rate=0.0, learning_rate=100.0, max_iterations=10)
        with self.assertRaises(StabilityViolationError) as context:
            run_meta_optimization(TaskSet((scalar_task(),)), self.K0, cfg, OptimizationMode.EXACT_ORACLE)
        self.assertEqual(1, context.exception.iteration)
        trace = context.exception.trace
        self.assertEqual(2, len(trace))
        self.assertEqual([1], trace.violations)
        self.assertEqual(float('inf'), trace.records[-1].ratio)

    def test_without_stability_checks(self):
        cfg = MetaConfig(adaptation_rate=0.0, learning_rate=0.005, max_iterations=3, check_stability=False)
        trace = run_meta_optimization(self.tasks, self.K0, cfg, OptimizationMode.EXACT_ORACLE)
        self.assertIsNone(trace.records[-1].maml_stabilizing)
        self.assertEqual([], trace.violations)

    def test_optimal_costs_reported(self):
        cfg = MetaConfig(max_iterations=0)
        trace = run_meta_optimization(self.tasks, self.K0, cfg, OptimizationMode.EXACT_ORACLE)
        self.assertEqual(1, len(trace))
        gaps = [evaluate_policy(task, self.K0).cost - optimal for task, optimal in
                zip(self.tasks, trace.optimal_costs)]
        np.testing.assert_allclose(gaps, trace.records[0].gaps)
        self.assertGreater(np.linalg.norm(exact_gradient(self.tasks[0], self.K0)), 0.0)


if __name__ == '__main__':
    unittest.main()
