"""
KL / JS divergences between token distributions and between language models.

The model-level estimator follows the reference model's greedy trajectory:
for every prompt x the reference generates y (storing its per-step
distributions), then x + y is teacher-forced once through the candidate and
the two distributions are compared step by step::

    D_X(M1 || M2) = 1/|X| sum_x 1/T_x sum_t D(M1(.|x, y<t) || M2(.|x, y<t))

T_x counts the generated tokens, the EOS step included.
"""

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import autodiff as ad
from .autodiff import EPSILON_FLOOR, row_js, row_kl
from .errors import ContractViolation
from .model import DEFAULT_MAX_NEW_TOKENS, encode_prompt, forward_logprobs, greedy_generate

logger = logging.getLogger(__name__)


class DivergenceKind(str, enum.Enum):
    KL = "kl"
    JS = "js"


def _probs(dist):
    return np.asarray(getattr(dist, "probs", dist), dtype=np.float64)


def kl(mu, nu, floor=EPSILON_FLOOR):
    """KL(mu || nu) in nats; nu is floored at ``floor`` and renormalised."""
    return float(max(row_kl(_probs(mu), _probs(nu), floor), 0.0))


def js(mu, nu):
    """Jensen-Shannon divergence in nats, bounded by ln 2."""
    return float(max(row_js(_probs(mu), _probs(nu)), 0.0))


def token_divergences(reference_probs, candidate_probs, kind, floor=EPSILON_FLOOR):
    """Row-wise divergence of two (T, V) probability matrices."""
    kind = DivergenceKind(kind)
    if kind is DivergenceKind.KL:
        values = row_kl(reference_probs, candidate_probs, floor)
    else:
        values = row_js(reference_probs, candidate_probs)
    return np.maximum(values, 0.0)


@dataclass(frozen=True)
class EstimatorConfig:
    kind: DivergenceKind
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS
    epsilon_floor: float = EPSILON_FLOOR


@dataclass
class ExampleDivergence:
    example_id: int
    per_token: np.ndarray
    T_x: int

    @property
    def mean(self):
        return float(np.mean(self.per_token))


@dataclass
class DivergenceEstimate:
    value: float
    per_example: list
    estimator_config: EstimatorConfig

    def recompute(self):
        return float(np.mean([ex.mean for ex in self.per_example]))


@dataclass
class Trajectory:
    """A reference model's greedy continuation of one prompt."""

    prompt: list
    generated: list
    reference_probs: np.ndarray = field(repr=False)

    @property
    def steps(self):
        return len(self.generated)

    def teacher_forced_input(self):
        # the last generated token is never an input
        return self.prompt + self.generated[:-1]

    def rows(self, offset):
        start = offset + len(self.prompt) - 1
        return np.arange(start, start + self.steps)


def _as_tokens(prompt):
    return encode_prompt(prompt) if isinstance(prompt, str) else list(prompt)


def trajectories(reference, prompts, max_new_tokens=DEFAULT_MAX_NEW_TOKENS):
    """Greedy reference trajectories; the reference side of the estimator is constant."""
    out = []
    for prompt in prompts:
        tokens = _as_tokens(prompt)
        generated, dists = greedy_generate(reference, tokens, max_new_tokens)
        out.append(Trajectory(tokens, generated, np.stack([d.probs for d in dists])))
    return out


def estimate_from_trajectories(candidate, trajs, kind, max_new_tokens=DEFAULT_MAX_NEW_TOKENS,
                               floor=EPSILON_FLOOR):
    """Evaluate the estimator for fixed reference trajectories (no tape)."""
    if not trajs:
        raise ContractViolation("divergence needs at least one input")
    kind = DivergenceKind(kind)
    with ad.paused():
        logp, batch = forward_logprobs(candidate, [t.teacher_forced_input() for t in trajs])
    per_example = []
    for i, (traj, offset) in enumerate(zip(trajs, batch.offsets)):
        cand = np.exp(logp.data[traj.rows(offset)])
        values = token_divergences(traj.reference_probs, cand, kind, floor)
        per_example.append(ExampleDivergence(i, values, traj.steps))
    value = float(np.mean([ex.mean for ex in per_example]))
    return DivergenceEstimate(value, per_example, EstimatorConfig(kind, max_new_tokens, floor))


def sequence_divergence(reference, candidate, inputs, kind, max_new_tokens=DEFAULT_MAX_NEW_TOKENS,
                        floor=EPSILON_FLOOR):
    """D_X(reference || candidate) over the prompts ``inputs``."""
    reference.require_compatible(candidate)
    if not inputs:
        raise ContractViolation("divergence needs at least one input")
    trajs = trajectories(reference, inputs, max_new_tokens)
    return estimate_from_trajectories(candidate, trajs, kind, max_new_tokens, floor)


def divergence_loss(candidate, trajs, kind, tensors=None, floor=EPSILON_FLOOR):
    """The estimator as a scalar tensor on the active tape.

    ``tensors`` are the candidate's (watched) parameter tensors; the
    reference distributions enter as constants.
    """
    if not trajs:
        raise ContractViolation("divergence needs at least one input")
    kind = DivergenceKind(kind)
    logp, batch = forward_logprobs(candidate, [t.teacher_forced_input() for t in trajs], tensors=tensors)
    total = None
    for traj, offset in zip(trajs, batch.offsets):
        rows = ad.take(logp, traj.rows(offset))
        per_token = ad.token_divergence(rows, traj.reference_probs, kind.value, floor)
        term = ad.mean(per_token)
        total = term if total is None else ad.add(total, term)
    return ad.multiply_scalar(total, 1.0 / len(trajs))


def write_heatmap(matrix, task_ids, path):
    """CSV of D_{X_i}(theta_i || theta_j): rows reference task i, columns candidate j."""
    frame = pd.DataFrame(np.asarray(matrix), index=list(task_ids), columns=list(task_ids))
    frame.index.name = "reference"
    frame.to_csv(path, float_format="%.12g")
    return frame
