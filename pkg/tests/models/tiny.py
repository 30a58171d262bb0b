"""Small models and vectors that build in milliseconds."""

import numpy as np

import mergeforge as mf
from mergeforge.trainer import TaskVector


def tiny_config(**overrides):
    values = dict(d_model=8, n_layers=1, n_heads=2, max_seq_len=24)
    values.update(overrides)
    return mf.ModelConfig(**values)


def tiny_model(seed=0, **overrides):
    return mf.init_model(tiny_config(**overrides), seed)


def nudged(base, seed, scale=0.05):
    """``base`` plus Gaussian noise: a stand-in for a fine-tuned checkpoint."""
    rng = np.random.default_rng(seed)
    return base.from_flat(base.flat() + scale * rng.standard_normal(base.size))


def finetuned_and_vectors(base, count, seed=0, scale=0.05):
    tuned = [nudged(base, seed + i, scale) for i in range(count)]
    tvs = [mf.task_vector(base, t, "t{}".format(i)) for i, t in enumerate(tuned)]
    return tuned, tvs


def flat_base(size):
    return mf.ParameterSet([("w", [("v", np.zeros(size))])])


def flat_vector(values, task_id=None):
    return TaskVector([("w", [("v", np.asarray(values, dtype=np.float64))])], task_id=task_id)


def numeric_gradient(fn, array, step=1e-5, indices=None):
    """Central differences of scalar ``fn(array)`` at ``indices`` (default: all)."""
    base = np.array(array, dtype=np.float64)
    flat = base.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    grad = np.zeros(flat.size)
    for i in indices:
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        grad[i] = (fn(plus.reshape(base.shape)) - fn(minus.reshape(base.shape))) / (2 * step)
    return grad.reshape(base.shape)
