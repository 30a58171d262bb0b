# Desk-scale scenarios on trained models
import importlib
import os
import tempfile
import unittest

SLOW = os.environ.get("MERGEFORGE_SLOW_TESTS") == "1"


@unittest.skipUnless(SLOW, "set MERGEFORGE_SLOW_TESTS=1")
class MainTest(unittest.TestCase):

    def setUp(self):
        self.tempdir = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tempdir.cleanup()

    def run_scenario(self, prefix, run="", **kwargs):
        test_mod = importlib.import_module('.models.' + prefix, 'tests')
        out_prefix = os.path.join(self.tempdir.name, prefix + run)
        return test_mod.execute(out_prefix, **kwargs), out_prefix

    def test_disjoint_pair(self):
        report, _ = self.run_scenario('disjoint_pair')
        self.assertLess(report.loc["merged", "loss"], 0.05)
        self.assertGreaterEqual(report.loc["merged", "anp"], 0.98)
        self.assertFalse(report.loc["base", "loss"] < 0.05 and report.loc["base", "anp"] >= 0.98)

    def test_disjoint_pair_deterministic(self):
        _, first = self.run_scenario('disjoint_pair', '_a')
        _, second = self.run_scenario('disjoint_pair', '_b')
        with open(first + '_report.csv') as f:
            text = f.read()
        with open(second + '_report.csv') as results_file:
            results = results_file.read()
        self.assertEqual(results, text)

    def test_pairwise_ordering(self):
        summary, _ = self.run_scenario('pairwise_ordering')
        anp = summary.set_index("method")["mean_anp"]
        self.assertGreaterEqual(anp["ll_js"], anp["tl_js"])
        self.assertGreaterEqual(anp["tl_js"], anp["average"])
        self.assertGreaterEqual(anp["ll_js"], anp["ties"])

    def test_task_count(self):
        summary, _ = self.run_scenario('pairwise_ordering', k_range=range(2, 8))
        average = summary[summary["method"] == "average"].sort_values("k")
        ll_js = summary[summary["method"] == "ll_js"].sort_values("k")
        self.assertTrue(all(a >= b for a, b in zip(average["mean_anp"], average["mean_anp"].iloc[1:])))
        for (_, avg), (_, ll) in zip(average.iterrows(), ll_js.iterrows()):
            self.assertGreaterEqual(ll["mean_anp"] + ll["ci95_margin"], avg["mean_anp"] - avg["ci95_margin"])

    def test_correlation(self):
        average, _ = self.run_scenario('correlation')
        self.assertGreater(average, 0.5)

    def test_budget(self):
        table, _ = self.run_scenario('budget')
        for _, row in table.iterrows():
            self.assertLessEqual(abs(row[25] - row[200]), 0.05)


if __name__ == '__main__':
    unittest.main()
