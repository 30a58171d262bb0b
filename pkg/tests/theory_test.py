import math
import unittest

import numpy as np

import mergeforge as mf
from mergeforge.tasks import CLASSIFICATION
from mergeforge.theory import (check_cross_entropy_identity, check_disentanglement, check_kracher_span,
                               check_tv_bound, empirical_distribution, total_variation)
from tests.models.tiny import flat_vector, nudged, tiny_model


class TestDisentanglement(unittest.TestCase):

    def setUp(self):
        self.model = tiny_model(seed=1, max_seq_len=40)
        self.tasks = mf.make_disjoint_suite(2, 0, n_train=4, n_validation=3, n_test=1)

    def test_identical_models_pass(self):
        report = check_disentanglement(self.model, [self.model, self.model], self.tasks, max_new_tokens=2)
        self.assertTrue(report.passed)
        self.assertAlmostEqual(report.measured["loss"], 0.0, delta=1e-10)
        self.assertEqual(sorted(report.measured["per_task_js"]), sorted(t.task_id for t in self.tasks))

    def test_different_model_fails_tight_epsilon(self):
        other = nudged(self.model, 3, scale=0.3)
        report = check_disentanglement(other, [self.model, self.model], self.tasks, epsilon=0.0, max_new_tokens=2)
        self.assertFalse(report.passed)
        self.assertGreater(report.measured["max_js"], 0.0)
        self.assertLessEqual(report.measured["max_js"], math.log(2))

    def test_loss_and_max_agree_over_random_coefficients(self):
        tuned = [nudged(self.model, 5, scale=0.3), nudged(self.model, 6, scale=0.3)]
        tvs = [mf.task_vector(self.model, t, task.task_id) for t, task in zip(tuned, self.tasks)]
        rng = np.random.default_rng(0)
        draws = []
        for _ in range(5):
            coeffs = mf.MergeCoefficients("task", [tau.task_id for tau in tvs], rng.uniform(0.0, 1.5, size=2))
            merged = mf.apply_task_arithmetic(self.model, tvs, coeffs)
            report = check_disentanglement(merged, tuned, self.tasks, epsilon=0.05, max_new_tokens=2)
            loss, largest = report.measured["loss"], report.measured["max_js"]
            self.assertAlmostEqual(loss, sum(report.measured["per_task_js"].values()), places=12)
            self.assertLessEqual(largest, loss + 1e-12)
            self.assertGreaterEqual(largest, loss / len(tvs) - 1e-12)
            self.assertEqual(report.passed, largest < 0.05)
            draws.append((loss, largest))
        for loss_a, max_a in draws:
            for loss_b, max_b in draws:
                if loss_a > len(tvs) * max_b:
                    self.assertGreater(max_a, max_b)

    def test_requires_disjoint_supports(self):
        plain = [mf.make_classification_task(mf.TaskSpec(CLASSIFICATION, rule, n_train=4), 0)
                 for rule in ("parity", "palindrome")]
        with self.assertRaises(mf.ContractViolation):
            check_disentanglement(self.model, [self.model, self.model], plain)


class TestTVBound(unittest.TestCase):

    def test_distributions(self):
        p = empirical_distribution(["a", "a", "b", "c"])
        self.assertEqual(p, {"a": 0.5, "b": 0.25, "c": 0.25})
        self.assertEqual(total_variation(p, {"a": 1.0}), 0.5)
        self.assertEqual(total_variation(p, p), 0.0)

    def test_random_perturbations(self):
        theta = tiny_model(seed=2)
        merged = nudged(theta, 7, scale=0.3)
        inputs = ["ab", "cd", "ef", "gh", "ij", "kl"]
        pool = inputs + ["mn", "op", "qr", "st"]
        rng = np.random.default_rng(0)
        for _ in range(10):
            perturbed = list(rng.choice(pool, size=int(rng.integers(1, 9))))
            report = check_tv_bound(theta, merged, inputs, perturbed, max_new_tokens=2)
            self.assertTrue(report.passed, report.measured)

    def test_same_inputs_zero(self):
        theta = tiny_model(seed=2)
        report = check_tv_bound(theta, nudged(theta, 1), ["ab", "cd"], ["cd", "ab"], max_new_tokens=2)
        self.assertEqual(report.measured["tv"], 0.0)
        self.assertAlmostEqual(report.measured["lhs"], 0.0, delta=1e-15)

    def test_empty(self):
        theta = tiny_model()
        with self.assertRaises(mf.ContractViolation):
            check_tv_bound(theta, theta, [], ["a"])


class TestCrossEntropyIdentity(unittest.TestCase):

    def test_holds(self):
        report = check_cross_entropy_identity()
        self.assertTrue(report.passed)
        self.assertEqual(report.measured["failures"], 0)
        self.assertLess(report.measured["max_error"], 1e-10)

    def test_zero_tolerance_fails(self):
        self.assertFalse(check_cross_entropy_identity(n_trials=10, dim=5, tolerance=0.0).passed)


class TestKracherSpan(unittest.TestCase):

    def test_random_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n, dim = int(rng.integers(2, 6)), int(rng.integers(6, 40))
            vectors = [flat_vector(rng.standard_normal(dim)) for _ in range(n)]
            report = check_kracher_span(vectors)
            self.assertTrue(report.passed, report.measured)
            np.testing.assert_allclose(report.measured["coefficients"], [1.0 / n] * n, rtol=0, atol=1e-8)

    def test_zero_vectors(self):
        report = check_kracher_span([flat_vector([0.0, 0.0]), flat_vector([0.0, 0.0])])
        self.assertTrue(report.passed)
        self.assertIsNotNone(report.note)

    def test_opposites(self):
        report = check_kracher_span([flat_vector([1.0, 2.0]), flat_vector([-1.0, -2.0])])
        self.assertTrue(report.passed)
        self.assertEqual(report.measured["mean_norm"], 0.0)

    def test_needs_two(self):
        with self.assertRaises(mf.ContractViolation):
            check_kracher_span([flat_vector([1.0])])


if __name__ == '__main__':
    unittest.main()
