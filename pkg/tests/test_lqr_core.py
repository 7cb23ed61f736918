import unittest

import numpy as np

from exceptions import ArgumentError, DimensionError, InstabilityError
from lqr_core import LqrTask, TaskSet, UpdateRule, adapted_gain, evaluate_policy, exact_gradient, \
    exact_hessian_action, exact_meta_gradient, is_stable, meta_objective, optimal_policy, policy_update
from verify import central_difference


def scalar_task(A: float = 0.9, B: float = 1.0) -> LqrTask:
    return LqrTask(A=[[A]], B=[[B]], Q=[[1.0]], R=[[1.0]], Psi=[[1.0]], Sigma0=[[1.0]])


class TestLqrTask(unittest.TestCase):
    def test_validation(self):
        with self.assertRaises(DimensionError):
            LqrTask(A=np.eye(2), B=np.ones((3, 1)), Q=np.eye(2), R=np.eye(1), Psi=np.eye(2), Sigma0=np.eye(2))
        with self.assertRaises(ArgumentError):
            LqrTask(A=[[0.5]], B=[[1.0]], Q=[[1.0]], R=[[0.0]], Psi=[[1.0]], Sigma0=[[1.0]])
        with self.assertRaises(ArgumentError):
            LqrTask(A=[[0.5]], B=[[1.0]], Q=[[-1.0]], R=[[1.0]], Psi=[[1.0]], Sigma0=[[1.0]])
        # A singular Sigma0 is allowed
        task = LqrTask(A=[[0.5]], B=[[1.0]], Q=[[1.0]], R=[[1.0]], Psi=[[1.0]], Sigma0=[[0.0]])
        self.assertEqual(0.0, task.initial_factor[0, 0])

    def test_check_gain(self):
        task = scalar_task()
        with self.assertRaises(DimensionError):
            task.check_gain(np.zeros((1, 2)))
        self.assertEqual((1, 1), task.check_gain(0.5).shape)

    def test_task_set(self):
        tasks = TaskSet((scalar_task(), scalar_task(0.5)))
        np.testing.assert_array_equal([0.5, 0.5], tasks.weights)
        with self.assertRaises(ArgumentError):
            TaskSet((scalar_task(), scalar_task(0.5)), [0.7, 0.7])
        with self.assertRaises(DimensionError):
            TaskSet((scalar_task(), LqrTask(A=np.eye(2), B=np.ones((2, 1)), Q=np.eye(2), R=np.eye(1),
                                            Psi=np.eye(2), Sigma0=np.eye(2))))
        with self.assertRaises(ArgumentError):
            TaskSet(())


class TestEvaluatePolicy(unittest.TestCase):
    def setUp(self) -> None:
        self.task = scalar_task()
        self.matrix_task = LqrTask(
            A=[[0.6, 0.2], [0.1, 0.5]],
            B=[[1.0, 0.0], [0.3, 1.0]],
            Q=np.eye(2),
            R=[[1.0, 0.2], [0.2, 2.0]],
            Psi=[[1.0, 0.1], [0.1, 0.5]],
            Sigma0=np.eye(2),
        )
        self.matrix_gain = np.array([[0.1, 0.05], [-0.1, 0.2]])

    def test_scalar_closed_forms(self):
        evaluation = evaluate_policy(self.task, [[0.5]])
        # J = (Q + K^2 R) Psi / (1 - (A - BK)^2) = 1.25 / 0.84
        self.assertAlmostEqual(1.25 / 0.84, evaluation.cost, places=12)
        self.assertAlmostEqual(1.488095, evaluation.cost, places=6)
        self.assertAlmostEqual(1.0 / 0.84, evaluation.Sigma[0, 0], places=12)
        self.assertAlmostEqual(-0.226757, exact_gradient(self.task, [[0.5]])[0, 0], places=6)

    def test_cost_identity(self):
        evaluation = evaluate_policy(self.matrix_task, self.matrix_gain)
        self.assertAlmostEqual(evaluation.cost, evaluation.gramian_cost, delta=1e-10 * evaluation.cost)

    def test_unstable_gain(self):
        self.assertFalse(is_stable(self.task, [[-0.2]]))
        with self.assertRaises(InstabilityError) as context:
            evaluate_policy(self.task, [[-0.2]])
        self.assertAlmostEqual(1.1, context.exception.radius)

    def test_gradient_finite_difference(self):
        numerical = central_difference(lambda K: evaluate_policy(self.matrix_task, K).cost, self.matrix_gain, 1e-6)
        np.testing.assert_allclose(numerical, exact_gradient(self.matrix_task, self.matrix_gain), atol=1e-6)

    def test_hessian_action_finite_difference(self):
        X = np.array([[0.3, -0.2], [0.5, 0.1]])
        step = 1e-6
        numerical = (exact_gradient(self.matrix_task, self.matrix_gain + step * X)
                     - exact_gradient(self.matrix_task, self.matrix_gain - step * X)) / (2 * step)
        np.testing.assert_allclose(numerical, exact_hessian_action(self.matrix_task, self.matrix_gain, X), atol=1e-6)

    def test_hessian_action_is_linear(self):
        X = np.array([[0.3, -0.2], [0.5, 0.1]])
        Y = np.array([[0.0, 1.0], [-1.0, 0.4]])
        np.testing.assert_allclose(
            exact_hessian_action(self.matrix_task, self.matrix_gain, 2 * X + Y),
            2 * exact_hessian_action(self.matrix_task, self.matrix_gain, X)
            + exact_hessian_action(self.matrix_task, self.matrix_gain, Y),
            atol=1e-10)

    def test_hessian_action_is_self_adjoint(self):
        X = np.array([[0.3, -0.2], [0.5, 0.1]])
        Y = np.array([[0.0, 1.0], [-1.0, 0.4]])
        self.assertAlmostEqual(np.sum(exact_hessian_action(self.matrix_task, self.matrix_gain, X) * Y),
                               np.sum(X * exact_hessian_action(self.matrix_task, self.matrix_gain, Y)), places=9)

    def test_hessian_quadratic_form(self):
        X = np.array([[0.3, -0.2], [0.5, 0.1]])
        step = 1e-4
        costs = [evaluate_policy(self.matrix_task, self.matrix_gain + t * X).cost for t in (-step, 0.0, step)]
        curvature = (costs[0] - 2 * costs[1] + costs[2]) / step ** 2
        self.assertAlmostEqual(curvature, np.sum(X * exact_hessian_action(self.matrix_task, self.matrix_gain, X)),
                               delta=1e-4 * abs(curvature))


class TestMetaGradient(unittest.TestCase):
    def setUp(self) -> None:
        self.tasks = TaskSet((scalar_task(0.9), scalar_task(0.7, 1.2), scalar_task(0.5, 0.8)))
        self.K = np.array([[0.3]])

    def test_zero_adaptation_rate_is_average_gradient(self):
        expected = np.mean([exact_gradient(task, self.K) for task in self.tasks], axis=0)
        np.testing.assert_allclose(exact_meta_gradient(self.tasks, self.K, 0.0), expected, atol=1e-12)
        self.assertAlmostEqual(np.mean([evaluate_policy(task, self.K).cost for task in self.tasks]),
                               meta_objective(self.tasks, self.K, 0.0), places=12)

    def test_finite_difference(self):
        eta = 0.05
        numerical = central_difference(lambda K: meta_objective(self.tasks, K, eta), self.K, 1e-6)
        np.testing.assert_allclose(numerical, exact_meta_gradient(self.tasks, self.K, eta), atol=1e-6)

    def test_matrix_finite_difference(self):
        tasks = TaskSet((
            LqrTask(A=[[0.6, 0.2], [0.1, 0.5]], B=[[1.0, 0.0], [0.3, 1.0]], Q=np.eye(2), R=[[1.0, 0.2], [0.2, 2.0]],
                    Psi=[[1.0, 0.1], [0.1, 0.5]], Sigma0=np.eye(2)),
            LqrTask(A=[[0.5, 0.1], [0.0, 0.7]], B=[[0.8, 0.1], [0.0, 1.0]], Q=np.eye(2), R=np.eye(2),
                    Psi=np.eye(2), Sigma0=np.eye(2)),
        ))
        K = np.array([[0.1, 0.05], [-0.1, 0.2]])
        eta = 0.05
        numerical = central_difference(lambda gain: meta_objective(tasks, gain, eta), K, 1e-6)
        np.testing.assert_allclose(numerical, exact_meta_gradient(tasks, K, eta), atol=1e-6)

    def test_adapted_gain(self):
        expected = self.K - 0.1 * exact_gradient(self.tasks[0], self.K)
        np.testing.assert_array_equal(expected, adapted_gain(self.tasks[0], self.K, 0.1))

    def test_adapted_instability_names_condition(self):
        with self.assertRaises(InstabilityError) as context:
            exact_meta_gradient(scalar_task(), [[0.5]], 10.0)
        self.assertEqual('adapted', context.exception.condition)
        self.assertEqual(0, context.exception.task_index)

    def test_policy_instability_names_condition(self):
        with self.assertRaises(InstabilityError) as context:
            meta_objective(self.tasks, [[-0.5]], 0.01)
        self.assertEqual('policy', context.exception.condition)
        self.assertEqual(0, context.exception.task_index)

    def test_negative_adaptation_rate(self):
        with self.assertRaises(ArgumentError):
            exact_meta_gradient(self.tasks, self.K, -0.1)


class TestPolicyUpdate(unittest.TestCase):
    def setUp(self) -> None:
        self.task = LqrTask(A=[[0.6, 0.2], [0.1, 0.5]], B=[[1.0], [0.3]], Q=np.eye(2), R=[[1.0]],
                            Psi=np.eye(2), Sigma0=np.eye(2))
        self.K = np.array([[0.4, -0.3]])

    def test_update_rules_descend(self):
        cost = evaluate_policy(self.task, self.K).cost
        for rule, step in ((UpdateRule.GD, 1e-2), (UpdateRule.NATURAL_GD, 1e-2), (UpdateRule.GAUSS_NEWTON, 0.5)):
            updated = policy_update(self.task, self.K, step, rule)
            self.assertLess(evaluate_policy(self.task, updated).cost, cost, rule)

    def test_gauss_newton_half_step_is_policy_iteration(self):
        evaluation = evaluate_policy(self.task, self.K)
        B, P = self.task.B, evaluation.P
        expected = np.linalg.solve(self.task.R + B.T @ P @ B, B.T @ P @ self.task.A)
        np.testing.assert_allclose(policy_update(self.task, self.K, 0.5, UpdateRule.GAUSS_NEWTON), expected,
                                   atol=1e-10)

    def test_gauss_newton_descends_to_optimum(self):
        _, optimal_cost = optimal_policy(self.task)
        K = self.K
        costs = [evaluate_policy(self.task, K).cost]
        for _ in range(8):
            K = policy_update(self.task, K, 0.5, UpdateRule.GAUSS_NEWTON)
            costs.append(evaluate_policy(self.task, K).cost)
        self.assertTrue(all(later <= earlier + 1e-12 for earlier, later in zip(costs, costs[1:])))
        self.assertAlmostEqual(optimal_cost, costs[-1], delta=1e-8 * optimal_cost)

    def test_zero_step(self):
        np.testing.assert_array_equal(self.K, policy_update(self.task, self.K, 0.0))
        with self.assertRaises(ArgumentError):
            policy_update(self.task, self.K, -1.0)


class TestOptimalPolicy(unittest.TestCase):
    def test_gradient_vanishes(self):
        task = LqrTask(A=[[1.1, 0.3], [0.0, 0.7]], B=[[1.0], [0.5]], Q=np.eye(2), R=[[1.0]], Psi=np.eye(2),
                       Sigma0=np.eye(2))
        K_star, cost = optimal_policy(task)
        self.assertTrue(is_stable(task, K_star))
        self.assertLess(np.linalg.norm(exact_gradient(task, K_star)), 1e-7)
        self.assertLess(cost, evaluate_policy(task, K_star + 0.05).cost)

    def test_scalar(self):
        K_star, cost = optimal_policy(scalar_task())
        P = (0.81 + np.sqrt(0.81 ** 2 + 4.0)) / 2.0
        self.assertAlmostEqual(0.9 * P / (1.0 + P), K_star[0, 0], places=8)
        # With Psi = 1 the optimal average cost equals P
        self.assertAlmostEqual(P, cost, places=8)


if __name__ == '__main__':
    unittest.main()
