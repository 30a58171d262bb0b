"""ANP of divergence-guided merging at 25 versus 200 validation examples on three pairs."""

import pandas as pd

from mergeforge.evaluation import budget_curve

from .suites import MAX_NEW_TOKENS, classification_suite, spec

PAIRS = ((0, 1), (2, 3), (4, 5))


def execute(out_prefix):
    tasks, base, models = classification_suite()
    frames = []
    for i, j in PAIRS:
        frames.append(budget_curve(base, [models[i], models[j]], [tasks[i], tasks[j]], [25, 200],
                                   spec("divergence_guided", "layer"), references=(),
                                   max_new_tokens=MAX_NEW_TOKENS))
    frame = pd.concat(frames, ignore_index=True)
    frame.to_csv(out_prefix + "_report.csv", index=False, float_format="%.12g")
    return frame.pivot(index="tasks", columns="budget", values="anp")
