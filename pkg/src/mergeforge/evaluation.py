"""
Task performance, ANP, rank correlation and merge sweeps.

PERF is exact-match accuracy for classification tasks and unigram ROUGE-1
F1 for generation tasks, on greedy generations truncated at EOS. ANP is the
mean over merged tasks of PERF(merged; t) / PERF(theta_t; t).
"""

import itertools
import logging
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import stats
from tqdm import tqdm

from .divergence import DivergenceKind, sequence_divergence, write_heatmap
from .errors import ContractViolation, DegenerateTaskError
from .merging import (MergeCoefficients, MergeLevel, MergeMethod, MergeSpec, apply_task_arithmetic,
                      merge)
from .model import DEFAULT_MAX_NEW_TOKENS, decode_tokens, encode_prompt, greedy_generate
from .trainer import task_vector

logger = logging.getLogger(__name__)

ACCURACY = "accuracy"
ROUGE1 = "rouge1"
Z_95 = 1.96


@dataclass
class PerfResult:
    task_id: str
    metric_kind: str
    value: float
    n_examples: int

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ContractViolation("performance {} outside [0, 1]".format(self.value))


def rouge1(generated, reference):
    """Unigram-overlap F1 between whitespace tokens."""
    hyp = Counter(generated.split())
    ref = Counter(reference.split())
    overlap = sum((hyp & ref).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(hyp.values())
    recall = overlap / sum(ref.values())
    return 2.0 * precision * recall / (precision + recall)


def exact_match(generated, answer):
    return float(generated.strip() == answer.strip())


def generate_answer(model, prompt, max_new_tokens=DEFAULT_MAX_NEW_TOKENS):
    tokens, _ = greedy_generate(model, encode_prompt(prompt), max_new_tokens)
    return decode_tokens(tokens)


def perf(model, task, metric_kind=None, split="test", max_new_tokens=DEFAULT_MAX_NEW_TOKENS):
    """PERF(model; task) on ``split``."""
    metric_kind = metric_kind or task.metric
    if metric_kind not in (ACCURACY, ROUGE1):
        raise ContractViolation("unknown metric: {}".format(metric_kind))
    examples = task.split(split)
    if not examples:
        raise ContractViolation("empty {} split for {}".format(split, task.task_id))
    score = exact_match if metric_kind == ACCURACY else rouge1
    values = [score(generate_answer(model, ex.prompt, max_new_tokens), ex.answer) for ex in examples]
    return PerfResult(task.task_id, metric_kind, float(np.mean(values)), len(values))


@dataclass
class ANPReport:
    merged_task_ids: list
    ratios: list
    anp: float
    method: str = None
    perf: list = field(default_factory=list)

    def to_row(self):
        row = {"method": self.method, "tasks": "+".join(self.merged_task_ids), "anp": self.anp}
        for task_id, ratio in zip(self.merged_task_ids, self.ratios):
            row["ratio_" + task_id] = ratio
        return row


def reference_perf(tasks, finetuned_models, metric_kind=None, max_new_tokens=DEFAULT_MAX_NEW_TOKENS):
    """PERF(theta_t; t) for every task, keyed by task id."""
    if len(tasks) != len(finetuned_models):
        raise ContractViolation("one fine-tuned model per task is required")
    return {task.task_id: perf(model, task, metric_kind, max_new_tokens=max_new_tokens)
            for task, model in zip(tasks, finetuned_models)}


def anp(merged_model, tasks, finetuned_models=None, metric_kind=None, method=None, denominators=None,
        max_new_tokens=DEFAULT_MAX_NEW_TOKENS):
    """Average normalized performance of ``merged_model`` over ``tasks``.

    ``denominators`` (task id -> PerfResult) may be given instead of
    ``finetuned_models`` to reuse PERF(theta_t; t) across experiments.
    """
    if denominators is None:
        if finetuned_models is None:
            raise ContractViolation("anp needs fine-tuned models or precomputed denominators")
        denominators = reference_perf(tasks, finetuned_models, metric_kind, max_new_tokens)
    ratios, results = [], []
    for task in tasks:
        reference = denominators[task.task_id]
        if reference.value <= 0.0:
            raise DegenerateTaskError(task.task_id)
        result = perf(merged_model, task, metric_kind, max_new_tokens=max_new_tokens)
        results.append(result)
        ratios.append(result.value / reference.value)
    return ANPReport([t.task_id for t in tasks], ratios, float(np.mean(ratios)), method, results)


def spearman(xs, ys):
    """Spearman rank correlation with average ranks for ties."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ContractViolation("spearman needs two vectors of equal length")
    if xs.size < 3:
        raise ContractViolation("spearman needs at least 3 points")
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise ContractViolation("rank correlation is undefined for a constant vector")
    rho, _ = stats.spearmanr(xs, ys)
    return float(rho)


def _pool_map(fn, items, threads):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def accuracy_matrix(checkpoints, tasks, task_ids=None, threads=1, max_new_tokens=DEFAULT_MAX_NEW_TOKENS):
    """PERF(theta_j, i) on the test split: rows tasks i, columns models j."""
    task_ids = task_ids or [t.task_id for t in tasks]
    cells = list(itertools.product(range(len(tasks)), range(len(checkpoints))))
    values = _pool_map(lambda ij: perf(checkpoints[ij[1]], tasks[ij[0]], max_new_tokens=max_new_tokens).value,
                       cells, threads)
    frame = pd.DataFrame(np.reshape(values, (len(tasks), len(checkpoints))),
                         index=[t.task_id for t in tasks], columns=task_ids)
    frame.index.name = "task"
    return frame


def divergence_matrix(checkpoints, tasks, kind=DivergenceKind.JS, threads=1,
                      max_new_tokens=DEFAULT_MAX_NEW_TOKENS):
    """D_{X_i}(theta_i || theta_j) over the validation prompts of task i.

    The diagonal is estimated like every other cell, so identical
    checkpoints give identical columns.
    """
    if len(checkpoints) != len(tasks):
        raise ContractViolation("one checkpoint per task is required")
    n = len(tasks)
    cells = list(itertools.product(range(n), range(n)))

    def cell(ij):
        i, j = ij
        return sequence_divergence(checkpoints[i], checkpoints[j], tasks[i].prompts("validation"),
                                   kind, max_new_tokens).value

    return np.reshape(_pool_map(cell, cells, threads), (n, n))


@dataclass
class CorrelationReport:
    kind: str
    per_task: dict
    average: float
    divergence: np.ndarray = field(repr=False)
    performance: pd.DataFrame = field(repr=False)


def divergence_perf_correlation(checkpoints, tasks, kind=DivergenceKind.JS, out_dir=None, threads=1,
                                max_new_tokens=DEFAULT_MAX_NEW_TOKENS):
    """Per task i: Spearman between {-D_{X_i}(theta_i || theta_j)}_j and {PERF(theta_j, i)}_j."""
    if len(tasks) < 3:
        raise ContractViolation("correlation needs at least 3 tasks")
    kind = DivergenceKind(kind)
    task_ids = [t.task_id for t in tasks]
    divergence = divergence_matrix(checkpoints, tasks, kind, threads, max_new_tokens)
    performance = accuracy_matrix(checkpoints, tasks, task_ids, threads, max_new_tokens)
    per_task = {task_id: spearman(-divergence[i], performance.values[i]) for i, task_id in enumerate(task_ids)}
    average = float(np.mean(list(per_task.values())))
    logger.info("average %s/performance correlation %.4f", kind.value, average)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_heatmap(divergence, task_ids, os.path.join(out_dir, "divergence_{}.csv".format(kind.value)))
        performance.to_csv(os.path.join(out_dir, "accuracy_matrix.csv"), float_format="%.12g")
        frame = pd.DataFrame({"task": list(per_task), "spearman": list(per_task.values())})
        frame.to_csv(os.path.join(out_dir, "correlation_{}.csv".format(kind.value)), index=False,
                     float_format="%.12g")
    return CorrelationReport(kind.value, per_task, average, divergence, performance)


def cosine_similarity_matrix(task_vectors):
    """Pairwise cosine similarity of flattened task vectors."""
    if len(task_vectors) < 2:
        raise ContractViolation("cosine similarity needs at least two vectors")
    flats = np.stack([tau.flat() for tau in task_vectors])
    norms = np.linalg.norm(flats, axis=1)
    if np.any(norms == 0.0):
        raise ContractViolation("cosine similarity of a zero task vector is undefined")
    sims = np.clip((flats @ flats.T) / np.outer(norms, norms), -1.0, 1.0)
    np.fill_diagonal(sims, 1.0)
    return sims


def ci95_margin(values):
    """1.96 standard errors (sample standard deviation); 0 for fewer than two or identical values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2 or np.all(values == values[0]):
        return 0.0
    return float(Z_95 * np.std(values, ddof=1) / math.sqrt(values.size))


@dataclass
class SweepReport:
    k: int
    experiments: list
    mean_anp: float
    ci95_margin: float
    method: str = None


def _merge_and_score(spec, base, tvs, tasks, denominators, max_new_tokens):
    validation = [t.prompts("validation") for t in tasks]
    result = merge(spec, base, tvs, validation)
    return anp(result.params, tasks, method=spec.describe(), denominators=denominators,
               max_new_tokens=max_new_tokens)


def merge_sweep(base, checkpoints, tasks, spec, k_range, denominators=None, threads=1, progress=False,
                max_new_tokens=DEFAULT_MAX_NEW_TOKENS):
    """Merge every k-subset of the checkpoints for each k in ``k_range``.

    Experiments for one k are listed in ``itertools.combinations`` order.
    """
    n = len(checkpoints)
    if len(tasks) != n:
        raise ContractViolation("one task per checkpoint is required")
    k_values = list(k_range)
    if not k_values or min(k_values) < 2 or max(k_values) > n:
        raise ContractViolation("k range must lie within [2, {}]".format(n))
    tvs = [task_vector(base, ckpt, task.task_id) for ckpt, task in zip(checkpoints, tasks)]
    if denominators is None:
        denominators = reference_perf(tasks, checkpoints, max_new_tokens=max_new_tokens)

    reports = []
    for k in k_values:
        combos = list(itertools.combinations(range(n), k))
        if spec.method is MergeMethod.SLERP and k != 2:
            logger.warning("slerp merges pairs only; skipping k=%d", k)
            continue

        def run(combo):
            return _merge_and_score(spec, base, [tvs[i] for i in combo], [tasks[i] for i in combo],
                                    denominators, max_new_tokens)

        items = tqdm(combos, desc="{} k={}".format(spec.describe(), k), disable=not progress, leave=False)
        experiments = _pool_map(run, items, threads)
        values = [e.anp for e in experiments]
        reports.append(SweepReport(k, experiments, float(np.mean(values)), ci95_margin(values), spec.describe()))
        logger.info("%s k=%d: %d experiments, mean ANP %.4f +/- %.4f", spec.describe(), k,
                    len(experiments), reports[-1].mean_anp, reports[-1].ci95_margin)
    return reports


def sweep_frame(reports, spec=None):
    """One row per experiment: method, level, k, tasks, per-task ratios, ANP."""
    rows = []
    for report in reports:
        for index, experiment in enumerate(report.experiments):
            row = experiment.to_row()
            row["level"] = spec.level.value if spec is not None and spec.level is not None else ""
            row["k"] = report.k
            row["experiment"] = index
            rows.append(row)
    frame = pd.DataFrame(rows)
    if frame.empty:
        return frame
    leading = ["method", "level", "k", "experiment", "tasks", "anp"]
    return frame[leading + sorted(c for c in frame.columns if c not in leading)]


def aggregate_experiments(frame):
    """Mean ANP and 95% CI margin per (method, level, k)."""
    grouped = frame.sort_values(["method", "level", "k", "experiment"]).groupby(["method", "level", "k"])
    summary = grouped["anp"].agg(["mean", "count", ci95_margin]).reset_index()
    return summary.rename(columns={"mean": "mean_anp", "count": "experiments", "ci95_margin": "ci95_margin"})


def iteration_curve(log, base=None, task_vectors=None, tasks=None, denominators=None, every=1,
                    max_new_tokens=DEFAULT_MAX_NEW_TOKENS):
    """Per logged iteration: loss, every coefficient and (with models and tasks) the ANP."""
    level = MergeLevel(log.spec.get("level", MergeLevel.TASK.value))
    rows = []
    for entry in log.iterations[::max(1, every)]:
        values = np.asarray(entry["coefficients"])
        row = {"iteration": entry["iteration"], "epoch": entry["epoch"], "loss": entry["loss"]}
        if level is MergeLevel.TASK:
            row.update({"gamma_{}".format(t): v for t, v in zip(log.task_ids, values)})
        else:
            for t, task_row in zip(log.task_ids, values):
                row.update({"gamma_{}_{}".format(t, l): v for l, v in zip(log.layer_names, task_row)})
        if tasks is not None:
            coeffs = MergeCoefficients(level, log.task_ids, values, log.layer_names)
            merged = apply_task_arithmetic(base, task_vectors, coeffs)
            row["anp"] = anp(merged, tasks, denominators=denominators, max_new_tokens=max_new_tokens).anp
        rows.append(row)
    return pd.DataFrame(rows)


DATA_FREE_REFERENCES = (MergeMethod.AVERAGE, MergeMethod.TIES, MergeMethod.MULTI_SLERP)


def budget_curve(base, checkpoints, tasks, sizes, spec, denominators=None, references=DATA_FREE_REFERENCES,
                 max_new_tokens=DEFAULT_MAX_NEW_TOKENS):
    """ANP of a data-driven merge per validation budget, plus data-free reference rows."""
    if spec.optimizer is None:
        raise ContractViolation("budget curves need a data-driven method")
    tvs = [task_vector(base, ckpt, task.task_id) for ckpt, task in zip(checkpoints, tasks)]
    if denominators is None:
        denominators = reference_perf(tasks, checkpoints, max_new_tokens=max_new_tokens)
    tasks_label = "+".join(t.task_id for t in tasks)
    rows = []
    for size in sizes:
        sized = replace(spec, optimizer=replace(spec.optimizer, dataset_size=int(size)))
        report = _merge_and_score(sized, base, tvs, tasks, denominators, max_new_tokens)
        rows.append({"tasks": tasks_label, "method": spec.describe(), "budget": int(size), "anp": report.anp})
    for method in references:
        report = _merge_and_score(MergeSpec(method), base, tvs, tasks, denominators, max_new_tokens)
        rows.append({"tasks": tasks_label, "method": method.value, "budget": 0, "anp": report.anp})
    return pd.DataFrame(rows)
