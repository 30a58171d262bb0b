"""Divergence-guided JS merge of a two-task disjoint-support suite, with the base as a control."""

import pandas as pd

import mergeforge as mf
from mergeforge.theory import check_disentanglement

from .suites import MAX_NEW_TOKENS, disjoint_suite, spec


def execute(out_prefix):
    tasks, base, models = disjoint_suite(2)
    tvs = [mf.task_vector(base, m, t.task_id) for m, t in zip(models, tasks)]
    validation = [t.prompts("validation") for t in tasks]
    result = mf.merge(spec("divergence_guided"), base, tvs, validation)

    rows = []
    for name, candidate in (("merged", result.params), ("base", base)):
        check = check_disentanglement(candidate, models, tasks, max_new_tokens=MAX_NEW_TOKENS)
        report = mf.anp(candidate, tasks, models, max_new_tokens=MAX_NEW_TOKENS)
        rows.append({"model": name, "loss": check.measured["loss"], "anp": report.anp})
    frame = pd.DataFrame(rows)
    frame.to_csv(out_prefix + "_report.csv", index=False, float_format="%.12g")
    return frame.set_index("model")
