"""
Completion-only supervised fine-tuning and task-vector extraction.
"""

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from tqdm import tqdm

from . import autodiff as ad
from .errors import ContractViolation, NumericError
from .model import EOS, ParameterSet, encode_prompt, encode_text, forward_logprobs
from .streams import substream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 16
    epochs: int = 40
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractViolation("learning_rate must be positive")
        if self.epochs < 1:
            raise ContractViolation("epochs must be at least 1")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be at least 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainLog:
    task_id: str = None
    epoch_losses: list = field(default_factory=list)
    steps: int = 0

    def to_dict(self):
        return {"task_id": self.task_id, "epoch_losses": list(self.epoch_losses), "steps": self.steps}


class Adam:
    """Adam on a flat float64 vector, with bias correction."""

    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, value, grad):
        """Return the updated copy of ``value``."""
        grad = np.asarray(grad, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return value - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


class TaskVector(ParameterSet):
    """Difference ``tuned - base`` with the base's layer structure."""

    def __init__(self, layers, config=None, task_id=None):
        super().__init__(layers, config=config)
        self.task_id = task_id


def training_sequence(prompt, answer):
    """Input tokens and the index of the first completion position."""
    prompt_tokens = encode_prompt(prompt)
    tokens = prompt_tokens + encode_text(answer) + [EOS]
    return tokens, len(prompt_tokens) - 1


def completion_loss(params, examples, tensors=None):
    """Mean cross-entropy over answer tokens (and EOS) only."""
    inputs, targets, completion = [], [], []
    for ex in examples:
        tokens, start = training_sequence(ex.prompt, ex.answer)
        inputs.append(tokens[:-1])
        targets.append(tokens[1:])
        completion.append(start)
    logp, batch = forward_logprobs(params, inputs, tensors=tensors)
    flat_targets = np.concatenate([np.asarray(t) for t in targets])
    picked = ad.gather_rows(logp, flat_targets)
    rows = np.concatenate([np.arange(off + start, off + length)
                           for off, start, length in zip(batch.offsets, completion, batch.lengths)])
    return ad.multiply_scalar(ad.mean(ad.take(picked, rows)), -1.0)


def loss_and_gradient(params, examples):
    """Completion loss and its gradient as a flat vector in manifest order."""
    with ad.Tape() as tape:
        tensors = params.tensors()
        for t in tensors.values():
            tape.watch(t)
        loss = completion_loss(params, examples, tensors)
        grads = tape.backward(loss)
    flat = np.concatenate([grads[name].reshape(-1) for name in params.names])
    return loss.item(), flat


def finetune(base, task, config, log=None, progress=False):
    """Fine-tune ``base`` on the train split of ``task``.

    The trained variable is the displacement from ``base``; the returned
    parameters are ``base + delta`` so that the task vector reconstructs
    them exactly.
    """
    if base.config is None:
        raise ContractViolation("base parameters carry no model config")
    train = task.split("train")
    limit = base.config.max_seq_len
    for ex in train:
        length = len(training_sequence(ex.prompt, ex.answer)[0]) - 1
        if length > limit:
            raise ContractViolation("{}: training sequence of length {} exceeds max_seq_len {}".format(
                task.task_id, length, limit))
    log = log if log is not None else TrainLog()
    log.task_id = task.task_id
    rng = substream(config.seed, "finetune", task.task_id)
    base_flat = base.flat()
    delta = np.zeros_like(base_flat)
    params = base
    optimizer = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)

    epochs = tqdm(range(config.epochs), desc="finetune {}".format(task.task_id),
                  disable=not progress, leave=False)
    for epoch in epochs:
        if not train:
            break
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[start:start + config.batch_size]]
            loss, grad = loss_and_gradient(params, batch)
            if not math.isfinite(loss):
                raise NumericError("non-finite training loss at epoch {}".format(epoch))
            delta = optimizer.step(delta, grad)
            params = base.from_flat(base_flat + delta)
            losses.append(loss)
            log.steps += 1
        log.epoch_losses.append(float(np.mean(losses)))
        logger.debug("%s epoch %d loss %.6f", task.task_id, epoch, log.epoch_losses[-1])

    if log.steps == 0:
        return base.from_flat(base_flat)
    return params


def exact_delta(base, tuned, max_steps=8):
    """``tuned - base`` nudged by ulps so that ``base + delta == tuned`` bitwise."""
    delta = tuned - base
    bad = (base + delta) != tuned
    for _ in range(max_steps):
        if not bad.any():
            break
        toward = np.where((base + delta)[bad] < tuned[bad], np.inf, -np.inf)
        delta[bad] = np.nextafter(delta[bad], toward)
        bad = (base + delta) != tuned
    if bad.any():
        logger.warning("%d coordinates cannot be reconstructed bitwise", int(bad.sum()))
    return delta


def task_vector(base, tuned, task_id=None):
    """tau = tuned - base, keeping the layer structure."""
    base.require_compatible(tuned)
    delta = exact_delta(base.flat(), tuned.flat())
    tau = base.from_flat(delta, config=base.config, cls=TaskVector)
    tau.task_id = task_id
    return tau


def reconstruct(base, tau):
    """theta_t = theta_0 + tau_t."""
    base.require_compatible(tau)
    return base.from_flat(base.flat() + tau.flat())
