"""Spearman correlation between -JS and cross-task accuracy on the 7-task suite."""

from mergeforge.config import thread_count
from mergeforge.evaluation import divergence_perf_correlation

from .suites import MAX_NEW_TOKENS, classification_suite


def execute(out_prefix):
    tasks, _, models = classification_suite()
    report = divergence_perf_correlation(models, tasks, "js", out_dir=out_prefix + "_correlation",
                                         threads=thread_count(), max_new_tokens=MAX_NEW_TOKENS)
    return report.average
