import math
import unittest

import numpy as np
import pandas as pd

import mergeforge as mf
from mergeforge.evaluation import (PerfResult, accuracy_matrix, aggregate_experiments, ci95_margin,
                                   divergence_matrix, exact_match, generate_answer, iteration_curve, rouge1,
                                   sweep_frame)
from mergeforge.merging import MergeLog
from mergeforge.tasks import CLASSIFICATION, Example, TaskDataset
from tests.models.tiny import finetuned_and_vectors, flat_vector, tiny_model

PROMPTS = ["ab", "cd", "ef", "gh"]


def echo_task(model, task_id, prompts=PROMPTS, max_new_tokens=3):
    """A task whose answers are ``model``'s own greedy outputs."""
    examples = [Example(p, generate_answer(model, p, max_new_tokens)) for p in prompts]
    return TaskDataset(task_id, CLASSIFICATION, examples, {"validation": [0, 1], "test": [2, 3]})


def stub_denominators(tasks, value=1.0):
    return {t.task_id: PerfResult(t.task_id, "accuracy", value, 2) for t in tasks}


class TestMetrics(unittest.TestCase):

    def test_rouge1(self):
        self.assertEqual(rouge1("a b c", "a b c"), 1.0)
        self.assertEqual(rouge1("x y", "a b"), 0.0)
        self.assertEqual(rouge1("", "a"), 0.0)
        # precision 1/2, recall 1/1
        self.assertAlmostEqual(rouge1("a b", "a"), 2.0 / 3.0, places=15)

    def test_rouge1_counts_repeats(self):
        self.assertAlmostEqual(rouge1("a a a", "a b"), 2 * (1 / 3) * (1 / 2) / (1 / 3 + 1 / 2), places=15)

    def test_exact_match(self):
        self.assertEqual(exact_match(" even ", "even"), 1.0)
        self.assertEqual(exact_match("evens", "even"), 0.0)

    def test_perf_on_own_outputs(self):
        model = tiny_model(seed=1)
        task = echo_task(model, "echo")
        result = mf.perf(model, task, max_new_tokens=3)
        self.assertEqual((result.value, result.n_examples, result.metric_kind), (1.0, 2, "accuracy"))

    def test_perf_errors(self):
        model = tiny_model(seed=1)
        task = echo_task(model, "echo")
        with self.assertRaises(mf.ContractViolation):
            mf.perf(model, task, metric_kind="bleu")
        with self.assertRaises(mf.ContractViolation):
            mf.perf(model, task, split="train")


class TestANP(unittest.TestCase):

    def setUp(self):
        self.model = tiny_model(seed=2)
        self.tasks = [echo_task(self.model, "a"), echo_task(self.model, "b", ["ij", "kl", "mn", "op"])]

    def test_same_model_is_one(self):
        report = mf.anp(self.model, self.tasks, [self.model, self.model], max_new_tokens=3)
        self.assertEqual(report.anp, 1.0)
        self.assertEqual(report.ratios, [1.0, 1.0])

    def test_denominators(self):
        denominators = stub_denominators(self.tasks)
        denominators["b"] = PerfResult("b", "accuracy", 0.25, 2)
        report = mf.anp(self.model, self.tasks, denominators=denominators, method="m", max_new_tokens=3)
        self.assertEqual(report.ratios, [1.0, 4.0])
        self.assertEqual(report.anp, 2.5)
        row = report.to_row()
        self.assertEqual((row["tasks"], row["ratio_b"], row["method"]), ("a+b", 4.0, "m"))

    def test_degenerate_task(self):
        denominators = stub_denominators(self.tasks, 0.0)
        with self.assertRaises(mf.DegenerateTaskError) as ctx:
            mf.anp(self.model, self.tasks, denominators=denominators)
        self.assertEqual(ctx.exception.task_id, "a")

    def test_needs_references(self):
        with self.assertRaises(mf.ContractViolation):
            mf.anp(self.model, self.tasks)


class TestSpearman(unittest.TestCase):

    def test_values(self):
        self.assertAlmostEqual(mf.spearman([1, 2, 3, 4, 5], [5, 6, 7, 8, 7]), 0.82078268166812329, places=12)
        self.assertAlmostEqual(mf.spearman([1, 2, 3], [10, 20, 30]), 1.0, places=15)
        self.assertAlmostEqual(mf.spearman([1, 2, 3], [3, 2, 1]), -1.0, places=15)

    def test_hand_ranks(self):
        # ranks x: 1..5, y: 2,1,4,3,5 -> 1 - 6*4/(5*24)
        self.assertAlmostEqual(mf.spearman([1, 2, 3, 4, 5], [2, 1, 4, 3, 5]), 0.8, places=12)

    def test_invalid(self):
        with self.assertRaises(mf.ContractViolation):
            mf.spearman([1, 1, 1], [1, 2, 3])
        with self.assertRaises(mf.ContractViolation):
            mf.spearman([1, 2], [1, 2])
        with self.assertRaises(mf.ContractViolation):
            mf.spearman([1, 2, 3], [1, 2])


class TestMatrices(unittest.TestCase):

    def test_cosine_similarity(self):
        sims = mf.cosine_similarity_matrix([flat_vector([1.0, 0.0]), flat_vector([1.0, 1.0]),
                                            flat_vector([-2.0, 0.0])])
        np.testing.assert_allclose(sims, [[1.0, math.sqrt(0.5), -1.0],
                                          [math.sqrt(0.5), 1.0, -math.sqrt(0.5)],
                                          [-1.0, -math.sqrt(0.5), 1.0]], rtol=0, atol=1e-15)
        with self.assertRaises(mf.ContractViolation):
            mf.cosine_similarity_matrix([flat_vector([1.0, 0.0]), flat_vector([0.0, 0.0])])

    def test_divergence_matrix(self):
        base = tiny_model(seed=3)
        tuned, _ = finetuned_and_vectors(base, 3, seed=0, scale=0.2)
        tasks = [echo_task(m, "t{}".format(i)) for i, m in enumerate(tuned)]
        matrix = divergence_matrix(tuned, tasks, "js", max_new_tokens=3)
        self.assertEqual(matrix.shape, (3, 3))
        np.testing.assert_allclose(np.diag(matrix), 0.0, rtol=0, atol=1e-10)
        self.assertTrue(np.all(matrix[~np.eye(3, dtype=bool)] > 0.0))
        threaded = divergence_matrix(tuned, tasks, "js", threads=3, max_new_tokens=3)
        np.testing.assert_array_equal(matrix, threaded)

    def test_identical_checkpoints_give_equal_columns(self):
        base = tiny_model(seed=3)
        tuned, _ = finetuned_and_vectors(base, 2, seed=0, scale=0.2)
        models = [tuned[0], tuned[1], tuned[1]]
        tasks = [echo_task(m, "t{}".format(i)) for i, m in enumerate(models)]
        for kind in ("kl", "js"):
            matrix = divergence_matrix(models, tasks, kind, max_new_tokens=3)
            np.testing.assert_array_equal(matrix[:, 1], matrix[:, 2])

    def test_accuracy_matrix_diagonal(self):
        base = tiny_model(seed=3)
        tuned, _ = finetuned_and_vectors(base, 2, seed=5, scale=0.2)
        tasks = [echo_task(m, "t{}".format(i)) for i, m in enumerate(tuned)]
        frame = accuracy_matrix(tuned, tasks, max_new_tokens=3)
        self.assertEqual(frame.index.name, "task")
        self.assertEqual(list(frame.columns), ["t0", "t1"])
        self.assertEqual(frame.loc["t0", "t0"], 1.0)
        self.assertEqual(frame.loc["t1", "t1"], 1.0)


class TestSweeps(unittest.TestCase):

    def setUp(self):
        self.base = tiny_model(seed=4)
        self.tuned, _ = finetuned_and_vectors(self.base, 4, seed=10)
        self.tasks = [echo_task(m, "t{}".format(i), max_new_tokens=2) for i, m in enumerate(self.tuned)]
        self.denominators = stub_denominators(self.tasks)

    def test_pair_count(self):
        reports = mf.merge_sweep(self.base, self.tuned, self.tasks, mf.MergeSpec("average"), [2, 3],
                                 self.denominators, max_new_tokens=2)
        self.assertEqual([len(r.experiments) for r in reports], [6, 4])
        self.assertEqual(reports[0].experiments[0].merged_task_ids, ["t0", "t1"])
        self.assertEqual(reports[0].method, "average")

    def test_equal_merges_have_zero_margin(self):
        same = [self.tuned[0]] * 4
        tasks = [echo_task(self.tuned[0], "t{}".format(i), max_new_tokens=2) for i in range(4)]
        reports = mf.merge_sweep(self.base, same, tasks, mf.MergeSpec("average"), [2],
                                 stub_denominators(tasks), max_new_tokens=2)
        self.assertEqual([e.anp for e in reports[0].experiments], [1.0] * 6)
        self.assertEqual(reports[0].ci95_margin, 0.0)

    def test_slerp_skips_other_k(self):
        reports = mf.merge_sweep(self.base, self.tuned, self.tasks, mf.MergeSpec("slerp"), [2, 3],
                                 self.denominators, max_new_tokens=2)
        self.assertEqual([r.k for r in reports], [2])

    def test_invalid_k(self):
        with self.assertRaises(mf.ContractViolation):
            mf.merge_sweep(self.base, self.tuned, self.tasks, mf.MergeSpec("average"), [5], self.denominators)
        with self.assertRaises(mf.ContractViolation):
            mf.merge_sweep(self.base, self.tuned, self.tasks, mf.MergeSpec("average"), [1, 2], self.denominators)

    def test_frame_and_aggregate(self):
        spec = mf.MergeSpec("average")
        reports = mf.merge_sweep(self.base, self.tuned, self.tasks, spec, [2], self.denominators,
                                 max_new_tokens=2)
        frame = sweep_frame(reports, spec)
        self.assertEqual(list(frame.columns[:6]), ["method", "level", "k", "experiment", "tasks", "anp"])
        self.assertEqual(len(frame), 6)
        summary = aggregate_experiments(frame)
        self.assertEqual(int(summary.loc[0, "experiments"]), 6)
        self.assertAlmostEqual(summary.loc[0, "mean_anp"], reports[0].mean_anp, places=12)
        self.assertAlmostEqual(summary.loc[0, "ci95_margin"], reports[0].ci95_margin, places=12)


class TestAggregation(unittest.TestCase):

    def test_ci_margin(self):
        self.assertEqual(ci95_margin([0.7, 0.7, 0.7]), 0.0)
        self.assertEqual(ci95_margin([0.7] * 21), 0.0)
        self.assertEqual(ci95_margin([0.4]), 0.0)
        self.assertAlmostEqual(ci95_margin([0.0, 1.0]), 1.96 * math.sqrt(0.5) / math.sqrt(2), places=14)

    def test_aggregate_groups(self):
        frame = pd.DataFrame({"method": ["a", "a", "b"], "level": ["", "", ""], "k": [2, 2, 2],
                              "experiment": [0, 1, 0], "tasks": ["x", "y", "x"], "anp": [0.5, 1.0, 0.9]})
        summary = aggregate_experiments(frame)
        self.assertEqual(list(summary["method"]), ["a", "b"])
        self.assertEqual(list(summary["mean_anp"]), [0.75, 0.9])
        self.assertEqual(list(summary["experiments"]), [2, 1])


class TestIterationCurve(unittest.TestCase):

    def test_rows(self):
        log = MergeLog("divergence_guided", {"level": "task"}, ["t0", "t1"])
        log.record(0, 0, 0.9, [0.5, 0.5])
        log.record(1, 0, 0.7, [0.6, 0.4])
        log.record(2, 1, 0.6, [0.7, 0.3])
        frame = iteration_curve(log, every=2)
        self.assertEqual(list(frame["iteration"]), [0, 2])
        self.assertEqual(list(frame["gamma_t1"]), [0.5, 0.3])

    def test_with_anp(self):
        base = tiny_model(seed=6)
        tuned, tvs = finetuned_and_vectors(base, 2, seed=1)
        tasks = [echo_task(m, "t{}".format(i), max_new_tokens=2) for i, m in enumerate(tuned)]
        log = MergeLog("divergence_guided", {"level": "layer"}, ["t0", "t1"], base.layer_names)
        log.record(0, 0, 0.1, np.zeros((2, len(base.layer_names))))
        frame = iteration_curve(log, base, tvs, tasks, stub_denominators(tasks), max_new_tokens=2)
        self.assertIn("gamma_t0_head", frame.columns)
        self.assertIn("anp", frame.columns)


if __name__ == '__main__':
    unittest.main()
