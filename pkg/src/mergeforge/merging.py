"""
Merging methods over task vectors tau_t = theta_t - theta_0.

Data-free: task arithmetic, model averaging, SLERP, Multi-SLERP, TIES and
the Kracher mean. Data-driven: divergence-guided coefficients (sum over
tasks of D_{X_t}(theta_t || merged)) and the entropy-minimisation baseline.
Both data-driven methods share one Adam loop over the coefficients, whose
gradient is the inner product of the parameter gradient with each task
vector (restricted to a layer at layer level).
"""

import enum
import json
import logging
import math
from dataclasses import dataclass, field, asdict, fields

import numpy as np
from tqdm import tqdm

from . import autodiff as ad
from .divergence import DivergenceKind, Trajectory, divergence_loss, trajectories
from .errors import ContractViolation, ConvergenceError, NumericError
from .model import DEFAULT_MAX_NEW_TOKENS, encode_prompt, forward_logprobs, greedy_generate
from .streams import substream
from .trainer import Adam, TaskVector, reconstruct

logger = logging.getLogger(__name__)


class MergeLevel(str, enum.Enum):
    TASK = "task"
    LAYER = "layer"


class MergeMethod(str, enum.Enum):
    AVERAGE = "average"
    TASK_ARITHMETIC = "task_arithmetic"
    SLERP = "slerp"
    MULTI_SLERP = "multi_slerp"
    TIES = "ties"
    ENTROPY_MIN = "entropy_min"
    DIVERGENCE_GUIDED = "divergence_guided"
    KRACHER = "kracher"


DATA_DRIVEN = (MergeMethod.ENTROPY_MIN, MergeMethod.DIVERGENCE_GUIDED)


@dataclass
class MergeCoefficients:
    """Gamma: one scalar per task, or one per (task, layer)."""

    level: MergeLevel
    task_ids: list
    values: np.ndarray
    layer_names: list = None

    def __post_init__(self):
        self.level = MergeLevel(self.level)
        self.task_ids = list(self.task_ids)
        self.values = np.array(self.values, dtype=np.float64)
        n = len(self.task_ids)
        if self.level is MergeLevel.TASK:
            expected = (n,)
        else:
            if not self.layer_names:
                raise ContractViolation("layer-level coefficients need layer names")
            self.layer_names = list(self.layer_names)
            expected = (n, len(self.layer_names))
        if self.values.shape != expected:
            raise ContractViolation("coefficients have shape {}, expected {}".format(self.values.shape, expected))
        if not np.all(np.isfinite(self.values)):
            raise NumericError("non-finite merging coefficient")

    @classmethod
    def constant(cls, level, task_ids, value, layer_names=None):
        level = MergeLevel(level)
        shape = (len(task_ids),) if level is MergeLevel.TASK else (len(task_ids), len(layer_names))
        return cls(level, task_ids, np.full(shape, float(value)), layer_names)

    @property
    def count(self):
        return int(self.values.size)

    def matrix(self, layer_names):
        """(n, L) coefficient matrix over ``layer_names``."""
        if self.level is MergeLevel.TASK:
            return np.repeat(self.values[:, None], len(layer_names), axis=1)
        if list(layer_names) != self.layer_names:
            raise ContractViolation("coefficients were built for layers {}".format(self.layer_names))
        return self.values

    def to_dict(self):
        return {"level": self.level.value, "task_ids": self.task_ids,
                "layer_names": self.layer_names, "values": self.values.tolist()}


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-2
    epochs: int = 4
    init: float = 0.5
    batch_per_task: int = 4
    dataset_size: int = 200
    seed: int = 0
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0 or self.epochs < 1 or self.batch_per_task < 1 or self.dataset_size < 1:
            raise ContractViolation("invalid optimizer configuration")

    @classmethod
    def preset(cls, method, level, track="classification", **overrides):
        """Defaults of the training-configuration table for ``method``/``level``/``track``."""
        method, level = MergeMethod(method), MergeLevel(level)
        size = 200 if level is MergeLevel.TASK else 400
        if method is MergeMethod.ENTROPY_MIN:
            lr = 1e-3 if track == "classification" else 1e-2
            values = dict(learning_rate=lr, epochs=5, init=0.5, dataset_size=size)
        else:
            values = dict(learning_rate=1e-2, epochs=4, init=0.5, dataset_size=size)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self):
        return asdict(self)


_METHOD_PARAMS = {
    MergeMethod.TASK_ARITHMETIC: {"coefficients": None, "scale": 1.0},
    MergeMethod.SLERP: {"slerp_t": 0.5},
    MergeMethod.MULTI_SLERP: {"weights": None},
    MergeMethod.TIES: {"mask_rate": 0.2, "ties_lambda": 1.0},
    MergeMethod.ENTROPY_MIN: {"level": MergeLevel.TASK, "optimizer": None},
    MergeMethod.DIVERGENCE_GUIDED: {"level": MergeLevel.TASK, "divergence": DivergenceKind.JS, "optimizer": None},
}
_OPTIONAL = ("coefficients", "weights", "optimizer")


@dataclass(frozen=True)
class MergeSpec:
    """A merging method plus exactly the parameters it needs."""

    method: MergeMethod
    level: MergeLevel = None
    divergence: DivergenceKind = None
    mask_rate: float = None
    ties_lambda: float = None
    slerp_t: float = None
    weights: tuple = None
    coefficients: tuple = None
    scale: float = None
    optimizer: OptimizerConfig = None
    track: str = "classification"

    def __post_init__(self):
        method = MergeMethod(self.method)
        object.__setattr__(self, "method", method)
        wanted = _METHOD_PARAMS.get(method, {})
        for f in fields(self):
            if f.name in ("method", "track"):
                continue
            value = getattr(self, f.name)
            if f.name not in wanted:
                if value is not None:
                    raise ContractViolation("{} does not take parameter {}".format(method.value, f.name))
            elif value is None and f.name not in _OPTIONAL:
                object.__setattr__(self, f.name, wanted[f.name])
        if self.level is not None:
            object.__setattr__(self, "level", MergeLevel(self.level))
        if self.divergence is not None:
            object.__setattr__(self, "divergence", DivergenceKind(self.divergence))
        if method in DATA_DRIVEN and self.optimizer is None:
            object.__setattr__(self, "optimizer", OptimizerConfig.preset(method, self.level, self.track))

    def describe(self):
        """Short label such as ``divergence_guided/layer/js``."""
        parts = [self.method.value]
        if self.level is not None:
            parts.append(self.level.value)
        if self.divergence is not None:
            parts.append(self.divergence.value)
        return "/".join(parts)

    def to_dict(self):
        out = {"method": self.method.value, "track": self.track}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("method", "track") or value is None:
                continue
            if isinstance(value, enum.Enum):
                value = value.value
            elif isinstance(value, OptimizerConfig):
                value = value.to_dict()
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out


# --------------------------------------------------------------------------- #
# data-free methods
# --------------------------------------------------------------------------- #

def _check_vectors(base, task_vectors):
    if not task_vectors:
        raise ContractViolation("at least one task vector is required")
    for tau in task_vectors:
        base.require_compatible(tau)


def _task_ids(task_vectors):
    return [getattr(tau, "task_id", None) or "task{}".format(i) for i, tau in enumerate(task_vectors)]


def apply_task_arithmetic(base, task_vectors, coeffs):
    """theta_0 + sum_t Gamma_t * tau_t, with per-layer Gamma at layer level."""
    _check_vectors(base, task_vectors)
    if len(task_vectors) != len(coeffs.task_ids):
        raise ContractViolation("{} task vectors but {} coefficient rows".format(
            len(task_vectors), len(coeffs.task_ids)))
    slices = list(base.layer_slices().values())
    matrix = coeffs.matrix(base.layer_names)
    merged = base.flat().copy()
    scale = np.empty_like(merged)
    for i, tau in enumerate(task_vectors):
        for j, sl in enumerate(slices):
            scale[sl] = matrix[i, j]
        merged += scale * tau.flat()
    return base.from_flat(merged)


def model_average(checkpoints):
    """Uniform average of the parameters of ``checkpoints``."""
    if len(checkpoints) < 2:
        raise ContractViolation("model averaging needs at least two checkpoints")
    first = checkpoints[0]
    for other in checkpoints[1:]:
        first.require_compatible(other)
    return first.from_flat(np.mean(np.stack([c.flat() for c in checkpoints]), axis=0))


def _unit(vector, what="task vector"):
    norm = np.linalg.norm(vector)
    if norm == 0.0:
        raise ContractViolation("zero {}".format(what))
    return vector / norm, norm


def slerp_merge(base, tau1, tau2, t):
    """theta_0 + sin((1-t)W)/sin W * u1 + sin(tW)/sin W * u2 on normalised task vectors.

    W is the angle between tau1 and tau2; below 1e-8 the normalised
    vectors are interpolated linearly.
    """
    if not 0.0 <= t <= 1.0:
        raise ContractViolation("slerp t must lie in [0, 1]")
    _check_vectors(base, [tau1, tau2])
    u1, _ = _unit(tau1.flat())
    u2, _ = _unit(tau2.flat())
    omega = math.acos(float(np.clip(np.dot(u1, u2), -1.0, 1.0)))
    if omega < 1e-8:
        merged = (1.0 - t) * u1 + t * u2
    else:
        so = math.sin(omega)
        merged = math.sin((1.0 - t) * omega) / so * u1 + math.sin(t * omega) / so * u2
    return base.from_flat(base.flat() + merged)


def _sphere_log(m, u):
    cos = float(np.clip(np.dot(m, u), -1.0, 1.0))
    angle = math.acos(cos)
    if angle < 1e-15:
        return np.zeros_like(m)
    sin = math.sin(angle)
    if sin < 1e-12:
        raise ContractViolation("antipodal task vectors have no spherical mean")
    return (u - cos * m) * (angle / sin)


def _sphere_exp(m, v):
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return m
    out = math.cos(norm) * m + math.sin(norm) * (v / norm)
    return out / np.linalg.norm(out)


def spherical_mean(units, weights, tol=1e-10, max_iter=1000):
    """Weighted Frechet mean of unit vectors by tangent-space averaging."""
    start = sum(w * u for w, u in zip(weights, units))
    m = units[0] if np.linalg.norm(start) < 1e-12 else start / np.linalg.norm(start)
    for iteration in range(max_iter):
        v = sum(w * _sphere_log(m, u) for w, u in zip(weights, units))
        if np.linalg.norm(v) < tol:
            return m
        m = _sphere_exp(m, v)
    raise ConvergenceError("spherical mean did not converge in {} iterations".format(max_iter))


def multi_slerp_merge(base, task_vectors, weights=None):
    """theta_0 + (sum_t w_t |tau_t|) * FrechetMean_w(tau_t / |tau_t|)."""
    _check_vectors(base, task_vectors)
    n = len(task_vectors)
    weights = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,) or np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ContractViolation("multi-slerp weights must lie on the simplex")
    units, norms = zip(*(_unit(tau.flat()) for tau in task_vectors))
    if n == 1:
        direction = units[0]
    else:
        direction = spherical_mean(units, weights)
    radius = float(np.dot(weights, norms))
    return base.from_flat(base.flat() + radius * direction)


def ties_vector(task_vectors, mask_rate):
    """Trim, elect sign and disjoint-mean the flattened task vectors."""
    if not 0.0 < mask_rate <= 1.0:
        raise ContractViolation("mask_rate must lie in (0, 1]")
    stacked = np.stack([tau.flat() for tau in task_vectors])
    size = stacked.shape[1]
    keep = max(1, int(round(mask_rate * size)))
    trimmed = np.zeros_like(stacked)
    for i, row in enumerate(stacked):
        top = np.argsort(-np.abs(row), kind="stable")[:keep]
        trimmed[i, top] = row[top]
    sign = np.sign(trimmed.sum(axis=0))
    agree = (trimmed != 0) & (np.sign(trimmed) == sign)
    counts = agree.sum(axis=0)
    totals = np.where(agree, trimmed, 0.0).sum(axis=0)
    return np.divide(totals, counts, out=np.zeros(size), where=counts > 0)


def ties_merge(base, task_vectors, mask_rate=0.2, ties_lambda=1.0):
    """theta_0 + lambda * TIES(tau_1..tau_n)."""
    _check_vectors(base, task_vectors)
    return base.from_flat(base.flat() + ties_lambda * ties_vector(task_vectors, mask_rate))


def kracher_mean(task_vectors):
    """argmin_tau sum_t |tau - tau_t|^2, i.e. the arithmetic mean."""
    if not task_vectors:
        raise ContractViolation("the Kracher mean needs at least one vector")
    first = task_vectors[0]
    for tau in task_vectors[1:]:
        first.require_compatible(tau)
    mean = np.mean(np.stack([tau.flat() for tau in task_vectors]), axis=0)
    out = first.from_flat(mean, cls=TaskVector)
    out.task_id = "kracher_mean"
    return out


# --------------------------------------------------------------------------- #
# coefficient optimisation
# --------------------------------------------------------------------------- #

@dataclass
class MergeLog:
    method: str
    spec: dict
    task_ids: list
    layer_names: list = None
    iterations: list = field(default_factory=list)
    final_coefficients: dict = None

    def record(self, iteration, epoch, loss, values):
        self.iterations.append({"iteration": iteration, "epoch": epoch, "loss": float(loss),
                                "coefficients": np.asarray(values).tolist()})

    @property
    def losses(self):
        return [entry["loss"] for entry in self.iterations]

    def to_dict(self):
        return asdict(self)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls(**json.load(f))


def coefficient_gradient(grad_flat, task_vectors, level, slices):
    """dL/dGamma from dL/dtheta: <grad, tau_t>, per layer at layer level."""
    level = MergeLevel(level)
    if level is MergeLevel.TASK:
        return np.array([np.dot(grad_flat, tau.flat()) for tau in task_vectors])
    return np.array([[np.dot(grad_flat[sl], tau.flat()[sl]) for sl in slices] for tau in task_vectors])


def parameter_gradient(merged, loss_fn):
    """Evaluate ``loss_fn(merged, tensors)`` on a tape; returns (loss, flat gradient)."""
    with ad.Tape() as tape:
        tensors = merged.tensors()
        for t in tensors.values():
            tape.watch(t)
        loss = loss_fn(merged, tensors)
        grads = tape.backward(loss)
    return loss.item(), np.concatenate([grads[name].reshape(-1) for name in merged.names])


class _BatchSchedule:
    """Seeded subset of each task's prompts, walked sequentially in fixed-size batches."""

    def __init__(self, prompt_lists, budget, batch, seed, salt):
        self.batch = batch
        self.orders = []
        for i, prompts in enumerate(prompt_lists):
            if not prompts:
                raise ContractViolation("empty validation set for task {}".format(i))
            if budget > len(prompts):
                logger.warning("data budget %d exceeds the %d prompts of task %d; using all of them",
                               budget, len(prompts), i)
            size = min(budget, len(prompts))
            rng = substream(seed, salt, i)
            self.orders.append([prompts[j] for j in rng.permutation(len(prompts))[:size]])
        self.iterations_per_epoch = max(math.ceil(len(order) / batch) for order in self.orders)

    def batch_for(self, task, step):
        order = self.orders[task]
        start = (step * self.batch) % len(order)
        return [order[(start + k) % len(order)] for k in range(min(self.batch, len(order)))]


def _optimize(base, task_vectors, level, config, step_loss, log, progress, desc):
    level = MergeLevel(level)
    task_ids = _task_ids(task_vectors)
    layer_names = base.layer_names if level is MergeLevel.LAYER else None
    values = MergeCoefficients.constant(level, task_ids, config.init, layer_names).values
    slices = list(base.layer_slices().values())
    adam = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    iteration = 0
    epochs = tqdm(range(config.epochs), desc=desc, disable=not progress, leave=False)
    for epoch in epochs:
        for step in range(step_loss.iterations_per_epoch):
            coeffs = MergeCoefficients(level, task_ids, values, layer_names)
            merged = apply_task_arithmetic(base, task_vectors, coeffs)
            loss, grad = step_loss(merged, step + epoch * step_loss.iterations_per_epoch)
            if not math.isfinite(loss):
                raise NumericError("non-finite merge loss at iteration {} (coefficients {})".format(
                    iteration, values.tolist()))
            log.record(iteration, epoch, loss, values)
            logger.debug("%s iteration %d loss %.6f", desc, iteration, loss)
            values = adam.step(values, coefficient_gradient(grad, task_vectors, level, slices))
            iteration += 1
    final = MergeCoefficients(level, task_ids, values, layer_names)
    log.final_coefficients = final.to_dict()
    return final


class _DivergenceObjective:
    """sum_t D_{X_t}(theta_t || merged) over one batch of prompts per task."""

    def __init__(self, base, task_vectors, validation_inputs, kind, config):
        self.kind = DivergenceKind(kind)
        self.config = config
        self.references = [reconstruct(base, tau) for tau in task_vectors]
        self.schedule = _BatchSchedule(validation_inputs, config.dataset_size, config.batch_per_task,
                                       config.seed, "divergence_schedule")
        self.iterations_per_epoch = self.schedule.iterations_per_epoch
        self._cache = {}

    def trajectories(self, task, prompts):
        out = []
        for prompt in prompts:
            key = (task, prompt)
            if key not in self._cache:
                self._cache[key] = trajectories(self.references[task], [prompt], self.config.max_new_tokens)[0]
            out.append(self._cache[key])
        return out

    def batches(self, step):
        return [self.trajectories(t, self.schedule.batch_for(t, step)) for t in range(len(self.references))]

    def loss(self, merged, tensors, batches):
        total = None
        for trajs in batches:
            term = divergence_loss(merged, trajs, self.kind, tensors)
            total = term if total is None else ad.add(total, term)
        return total

    def __call__(self, merged, step):
        batches = self.batches(step)
        return parameter_gradient(merged, lambda m, t: self.loss(m, t, batches))


def optimize_divergence_coeffs(base, task_vectors, validation_inputs, kind=DivergenceKind.JS,
                               level=MergeLevel.TASK, config=None, progress=False):
    """Gamma* = argmin sum_t D_{X_t}(theta_t || theta_0 + sum Gamma tau) by Adam.

    Returns the final coefficients and the per-iteration log.
    """
    _check_vectors(base, task_vectors)
    if len(validation_inputs) != len(task_vectors):
        raise ContractViolation("one validation prompt list per task vector is required")
    config = config or OptimizerConfig.preset(MergeMethod.DIVERGENCE_GUIDED, level)
    objective = _DivergenceObjective(base, task_vectors, validation_inputs, kind, config)
    log = MergeLog(MergeMethod.DIVERGENCE_GUIDED.value,
                   {"divergence": DivergenceKind(kind).value, "level": MergeLevel(level).value,
                    "optimizer": config.to_dict()},
                   _task_ids(task_vectors), base.layer_names if MergeLevel(level) is MergeLevel.LAYER else None)
    coeffs = _optimize(base, task_vectors, level, config, objective, log, progress, "divergence merge")
    return coeffs, log


def mean_entropy_loss(merged, tensors, trajs):
    """Mean over prompts of the mean per-step entropy along ``trajs``."""
    logp, batch = forward_logprobs(merged, [t.teacher_forced_input() for t in trajs], tensors=tensors)
    total = None
    for traj, offset in zip(trajs, batch.offsets):
        term = ad.mean(ad.entropy_rows(ad.take(logp, traj.rows(offset))))
        total = term if total is None else ad.add(total, term)
    return ad.multiply_scalar(total, 1.0 / len(trajs))


def own_trajectories(params, prompts, max_new_tokens):
    out = []
    for prompt in prompts:
        tokens = encode_prompt(prompt) if isinstance(prompt, str) else list(prompt)
        generated, dists = greedy_generate(params, tokens, max_new_tokens)
        out.append(Trajectory(tokens, generated, np.stack([d.probs for d in dists])))
    return out


class _EntropyObjective:
    def __init__(self, n_tasks, unlabeled_inputs, config):
        self.config = config
        budget = config.dataset_size * n_tasks
        self.schedule = _BatchSchedule([list(unlabeled_inputs)], budget, config.batch_per_task * n_tasks,
                                       config.seed, "entropy_schedule")
        self.iterations_per_epoch = self.schedule.iterations_per_epoch

    def __call__(self, merged, step):
        with ad.paused():
            trajs = own_trajectories(merged, self.schedule.batch_for(0, step), self.config.max_new_tokens)
        return parameter_gradient(merged, lambda m, t: mean_entropy_loss(m, t, trajs))


def entropy_min_coeffs(base, task_vectors, unlabeled_inputs, level=MergeLevel.TASK, config=None,
                       log=None, progress=False):
    """Coefficients minimising the merged model's prediction entropy on unlabeled prompts."""
    _check_vectors(base, task_vectors)
    if not unlabeled_inputs:
        raise ContractViolation("entropy minimisation needs unlabeled prompts")
    config = config or OptimizerConfig.preset(MergeMethod.ENTROPY_MIN, level)
    objective = _EntropyObjective(len(task_vectors), unlabeled_inputs, config)
    if log is None:
        log = MergeLog(MergeMethod.ENTROPY_MIN.value, {}, [])
    log.spec = {"level": MergeLevel(level).value, "optimizer": config.to_dict()}
    log.task_ids = _task_ids(task_vectors)
    log.layer_names = base.layer_names if MergeLevel(level) is MergeLevel.LAYER else None
    return _optimize(base, task_vectors, level, config, objective, log, progress, "entropy merge")


# --------------------------------------------------------------------------- #
# dispatch
# --------------------------------------------------------------------------- #

@dataclass
class MergeResult:
    params: object
    coefficients: MergeCoefficients = None
    log: MergeLog = None


def merge(spec, base, task_vectors, validation_inputs=None, progress=False):
    """Run ``spec`` on ``task_vectors``; data-driven methods read ``validation_inputs``
    (one prompt list per task)."""
    _check_vectors(base, task_vectors)
    method = spec.method
    n = len(task_vectors)
    ids = _task_ids(task_vectors)
    log = MergeLog(method.value, spec.to_dict(), ids)
    coeffs = None

    if method is MergeMethod.AVERAGE:
        if n == 1:
            params = reconstruct(base, task_vectors[0])
        else:
            params = model_average([reconstruct(base, tau) for tau in task_vectors])
        coeffs = MergeCoefficients.constant(MergeLevel.TASK, ids, 1.0 / n)
    elif method is MergeMethod.TASK_ARITHMETIC:
        values = spec.coefficients if spec.coefficients is not None else [spec.scale] * n
        coeffs = MergeCoefficients(MergeLevel.TASK, ids, values)
        params = apply_task_arithmetic(base, task_vectors, coeffs)
    elif method is MergeMethod.SLERP:
        if n != 2:
            raise ContractViolation("slerp merges exactly two task vectors")
        params = slerp_merge(base, task_vectors[0], task_vectors[1], spec.slerp_t)
    elif method is MergeMethod.MULTI_SLERP:
        params = multi_slerp_merge(base, task_vectors, spec.weights)
    elif method is MergeMethod.TIES:
        params = ties_merge(base, task_vectors, spec.mask_rate, spec.ties_lambda)
    elif method is MergeMethod.KRACHER:
        params = reconstruct(base, kracher_mean(task_vectors))
        coeffs = MergeCoefficients.constant(MergeLevel.TASK, ids, 1.0 / n)
    elif method is MergeMethod.DIVERGENCE_GUIDED:
        if validation_inputs is None:
            raise ContractViolation("divergence-guided merging needs validation prompts")
        coeffs, log = optimize_divergence_coeffs(base, task_vectors, validation_inputs, spec.divergence,
                                                 spec.level, spec.optimizer, progress)
        log.spec = spec.to_dict()
        params = apply_task_arithmetic(base, task_vectors, coeffs)
    elif method is MergeMethod.ENTROPY_MIN:
        if validation_inputs is None:
            raise ContractViolation("entropy minimisation needs unlabeled prompts")
        pooled = [p for prompts in validation_inputs for p in prompts]
        coeffs = entropy_min_coeffs(base, task_vectors, pooled, spec.level, spec.optimizer, log, progress)
        log.spec = spec.to_dict()
        params = apply_task_arithmetic(base, task_vectors, coeffs)
    else:
        raise ContractViolation("unsupported method: {}".format(method))

    if coeffs is not None and log.final_coefficients is None:
        log.final_coefficients = coeffs.to_dict()
    logger.info("merged %d task vectors with %s", n, spec.describe())
    return MergeResult(params, coeffs, log)
