"""
Executable checks of the merging theory on small models.

Each check returns a CheckReport whose ``passed`` flag is decided only from
the measured quantities and the tolerances stored next to them.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import special

from .divergence import DivergenceKind, estimate_from_trajectories, sequence_divergence, trajectories
from .errors import ContractViolation
from .merging import kracher_mean
from .model import DEFAULT_MAX_NEW_TOKENS
from .streams import substream
from .tasks import supports_disjoint

logger = logging.getLogger(__name__)

LN2 = math.log(2.0)


@dataclass
class CheckReport:
    check_id: str
    passed: bool
    measured: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    note: str = None

    def to_dict(self):
        return asdict(self)


def check_disentanglement(merged, finetuned_models, tasks, epsilon=0.1, split="validation",
                          max_new_tokens=DEFAULT_MAX_NEW_TOKENS):
    """JS between each fine-tuned model and ``merged`` on that task's own support.

    Passes iff every per-task mean is below ``epsilon``; the summed merging
    loss is reported alongside.
    """
    if len(finetuned_models) != len(tasks):
        raise ContractViolation("one fine-tuned model per task is required")
    if not supports_disjoint(tasks):
        raise ContractViolation("weight disentanglement is only defined for disjoint task supports")
    per_task = {}
    for model, task in zip(finetuned_models, tasks):
        estimate = sequence_divergence(model, merged, task.prompts(split), DivergenceKind.JS, max_new_tokens)
        per_task[task.task_id] = estimate.value
    loss = float(sum(per_task.values()))
    passed = all(value < epsilon for value in per_task.values())
    logger.debug("disentanglement: loss %.6f, max per-task %.6f", loss, max(per_task.values()))
    return CheckReport("disentanglement", passed,
                       {"per_task_js": per_task, "loss": loss, "max_js": max(per_task.values())},
                       {"epsilon": epsilon})


def empirical_distribution(prompts):
    counts = Counter(prompts)
    total = float(sum(counts.values()))
    return {prompt: count / total for prompt, count in counts.items()}


def total_variation(p, q):
    support = set(p) | set(q)
    return 0.5 * sum(abs(p.get(x, 0.0) - q.get(x, 0.0)) for x in support)


def check_tv_bound(theta_t, merged, inputs, perturbed, max_new_tokens=DEFAULT_MAX_NEW_TOKENS):
    """|JS_X - JS_X'| <= 2 ln 2 * TV(X, X') for empirical prompt distributions X, X'."""
    if not inputs or not perturbed:
        raise ContractViolation("both prompt collections must be nonempty")
    p = empirical_distribution(inputs)
    q = empirical_distribution(perturbed)
    universe = sorted(set(p) | set(q))
    trajs = trajectories(theta_t, universe, max_new_tokens)
    estimate = estimate_from_trajectories(merged, trajs, DivergenceKind.JS, max_new_tokens)
    per_prompt = {x: ex.mean for x, ex in zip(universe, estimate.per_example)}
    js_x = sum(w * per_prompt[x] for x, w in p.items())
    js_perturbed = sum(w * per_prompt[x] for x, w in q.items())
    lhs = abs(js_x - js_perturbed)
    tv = total_variation(p, q)
    rhs = 2.0 * LN2 * tv
    return CheckReport("tv_bound", lhs <= rhs + 1e-9,
                       {"js_x": js_x, "js_perturbed": js_perturbed, "lhs": lhs, "tv": tv, "rhs": rhs},
                       {"slack": 1e-9})


def check_cross_entropy_identity(n_trials=10000, dim=259, seed=0, tolerance=1e-10):
    """H(p, q) = H(p) + KL(p || q) on random simplex pairs."""
    if n_trials < 1 or dim < 1:
        raise ContractViolation("n_trials and dim must be positive")
    rng = substream(seed, "cross_entropy_identity")
    p = rng.dirichlet(np.ones(dim), size=n_trials)
    q = rng.dirichlet(np.ones(dim), size=n_trials)
    cross = -np.sum(special.xlogy(p, q), axis=1)
    entropy = np.sum(special.entr(p), axis=1)
    divergence = np.sum(special.rel_entr(p, q), axis=1)
    errors = np.abs(cross - entropy - divergence)
    worst = float(errors.max())
    return CheckReport("cross_entropy_identity", worst < tolerance,
                       {"trials": n_trials, "dim": dim, "max_error": worst, "failures": int((errors >= tolerance).sum())},
                       {"tolerance": tolerance})


def check_kracher_span(task_vectors, tolerance=1e-8):
    """The Kracher mean lies in span{tau_t}: least-squares projection residual."""
    if len(task_vectors) < 2:
        raise ContractViolation("the span check needs at least two vectors")
    flats = np.stack([tau.flat() for tau in task_vectors], axis=1)
    if not np.any(flats):
        return CheckReport("kracher_span", True, {"residual": 0.0}, {"tolerance": tolerance},
                           note="all task vectors are zero; the check is vacuous")
    mean = kracher_mean(task_vectors).flat()
    scale = np.linalg.norm(mean)
    if scale == 0.0:
        return CheckReport("kracher_span", True, {"residual": 0.0, "mean_norm": 0.0}, {"tolerance": tolerance},
                           note="the Kracher mean is the zero vector")
    coeffs, *_ = np.linalg.lstsq(flats, mean, rcond=None)
    residual = float(np.linalg.norm(flats @ coeffs - mean) / scale)
    return CheckReport("kracher_span", residual < tolerance,
                       {"residual": residual, "mean_norm": float(scale), "coefficients": coeffs.tolist()},
                       {"tolerance": tolerance})
