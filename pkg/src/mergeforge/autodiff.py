"""
Dense float64 tensors with a reverse-mode gradient tape.

Operations are recorded on the tape that is active in the current context
(``with Tape() as tape: ...``) whenever one of their inputs is tracked by
that tape. Tracked tensors are the leaves registered with
:meth:`Tape.watch` and everything computed from them. Without an active
tape the same operations simply evaluate, which is how inference runs.

The op set is closed. Each kind has a shape check, a forward rule and a
backward rule in ``_RULES``; gradients of a leaf that feeds several nodes
accumulate additively.
"""

import contextlib
import contextvars
import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import ContractViolation, NumericError

EPSILON_FLOOR = 1e-12

_ACTIVE_TAPE = contextvars.ContextVar("mergeforge_active_tape", default=None)


class OpKind(str, enum.Enum):
    MATMUL = "matmul"
    ADD = "add"
    MULTIPLY_SCALAR = "multiply_scalar"
    RELU = "relu"
    EMBEDDING_LOOKUP = "embedding_lookup"
    LOG_SOFTMAX_ROWS = "log_softmax_rows"
    GATHER_ROWS = "gather_rows"
    MEAN = "mean"
    SUM = "sum"
    LAYER_SCALE = "layer_scale"
    # attention and loss kernels that have no composition in the ops above
    TRANSPOSE = "transpose"
    SLICE_COLS = "slice_cols"
    CONCAT_COLS = "concat_cols"
    MASKED_SOFTMAX_ROWS = "masked_softmax_rows"
    TAKE = "take"
    TOKEN_DIVERGENCE = "token_divergence"
    ENTROPY_ROWS = "entropy_rows"


class Tensor:
    """A dense row-major array of finite float64 values.

    Scalars are stored with shape ``(1,)``.
    """

    __slots__ = ("data", "name")

    def __init__(self, data, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0 or any(d <= 0 for d in arr.shape):
            raise ContractViolation(
                "tensor dimensions must be positive, got {}".format(arr.shape))
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite value in tensor {}".format(name or ""))
        arr.flags.writeable = False
        self.data = arr
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
        out.name = None
        return out

    @property
    def shape(self):
        return list(self.data.shape)

    @property
    def size(self):
        return int(self.data.size)

    def item(self):
        if self.data.size != 1:
            raise ContractViolation("item() needs a scalar, shape is {}".format(self.shape))
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = " {}".format(self.name) if self.name else ""
        return "Tensor{}(shape={})".format(label, self.shape)


@dataclass
class TapeNode:
    index: int
    kind: OpKind
    inputs: tuple
    output: Tensor
    cached_values: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)


class Tape:
    """Records operations for one backward pass.

    A tape belongs to one thread of control; separate tapes may read the
    same (immutable) parameter arrays concurrently.
    """

    def __init__(self):
        self.nodes = []
        self._leaves = {}
        self._tracked = set()
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def watch(self, tensor):
        """Register ``tensor`` as a leaf whose gradient backward() returns."""
        if not isinstance(tensor, Tensor):
            raise ContractViolation("only tensors can be watched")
        if not tensor.name:
            raise ContractViolation("leaf tensors need a name")
        known = self._leaves.get(tensor.name)
        if known is not None and known is not tensor:
            raise ContractViolation("duplicate leaf name: {}".format(tensor.name))
        self._leaves[tensor.name] = tensor
        self._tracked.add(id(tensor))
        return tensor

    def tracks(self, tensor):
        return id(tensor) in self._tracked

    def _record(self, kind, inputs, output, cache, attrs):
        node = TapeNode(len(self.nodes), kind, inputs, output, cache, attrs)
        self.nodes.append(node)
        self._tracked.add(id(output))
        return node

    def backward(self, loss):
        """Return ``{leaf name: gradient array}`` for a scalar ``loss``."""
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ContractViolation("backward() needs a scalar loss")
        if not self.tracks(loss):
            raise ContractViolation("loss was not computed on this tape")

        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            input_grads = _RULES[node.kind].backward(g, node)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or id(tensor) not in self._tracked:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad

        result = {}
        for name, leaf in self._leaves.items():
            grad = grads.get(id(leaf))
            result[name] = np.zeros_like(leaf.data) if grad is None else grad
        return result


def active_tape():
    return _ACTIVE_TAPE.get()


@contextlib.contextmanager
def paused():
    """Evaluate without recording, even inside an active tape."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def backward(loss):
    """Run backward on the tape that is active in this context."""
    tape = active_tape()
    if tape is None:
        raise ContractViolation("no active tape")
    return tape.backward(loss)


def forward_op(op_kind, inputs, **attrs):
    """Evaluate one op and record it on the active tape when relevant."""
    try:
        kind = OpKind(op_kind)
    except ValueError:
        raise ContractViolation("unsupported op kind: {}".format(op_kind)) from None
    inputs = tuple(inputs)
    for tensor in inputs:
        if not isinstance(tensor, Tensor):
            raise ContractViolation("{} expects Tensor inputs".format(kind.value))
    rule = _RULES[kind]
    rule.check(inputs, attrs)
    data, cache = rule.forward(inputs, attrs)
    if not np.all(np.isfinite(data)):
        raise NumericError("{} produced a non-finite value".format(kind.value))
    out = Tensor._wrap(np.ascontiguousarray(data, dtype=np.float64))
    tape = active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape._record(kind, inputs, out, cache, attrs)
    return out


# --------------------------------------------------------------------------- #
# rules
# --------------------------------------------------------------------------- #

class _Rule:
    def __init__(self, arity, check, forward, backward):
        self.arity = arity
        self.check_shapes = check
        self.forward = forward
        self.backward = backward

    def check(self, inputs, attrs):
        if self.arity is not None and len(inputs) != self.arity:
            raise ContractViolation(
                "expected {} inputs, got {}".format(self.arity, len(inputs)))
        self.check_shapes(inputs, attrs)


def _require(condition, message, *args):
    if not condition:
        raise ContractViolation(message.format(*args))


def _int_index(values, limit, what):
    idx = np.asarray(values)
    _require(idx.ndim == 1 and idx.size > 0, "{} must be a nonempty 1-d index", what)
    _require(np.issubdtype(idx.dtype, np.integer), "{} must be integers", what)
    _require(idx.min() >= 0 and idx.max() < limit, "{} out of range [0, {})", what, limit)
    return idx.astype(np.intp)


# matmul

def _check_matmul(inputs, attrs):
    a, b = inputs
    _require(a.data.ndim == 2 and b.data.ndim == 2, "matmul needs 2-d operands")
    _require(a.shape[1] == b.shape[0], "matmul shapes {} and {} do not conform", a.shape, b.shape)


def _forward_matmul(inputs, attrs):
    a, b = inputs
    return a.data @ b.data, {}


def _backward_matmul(g, node):
    a, b = node.inputs
    return g @ b.data.T, a.data.T @ g


# add (same shape, or a row vector broadcast over the rows of a matrix)

def _check_add(inputs, attrs):
    a, b = inputs
    if a.shape == b.shape:
        return
    _require(a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1],
             "add shapes {} and {} do not conform", a.shape, b.shape)


def _forward_add(inputs, attrs):
    a, b = inputs
    return a.data + b.data, {}


def _backward_add(g, node):
    a, b = node.inputs
    if a.shape == b.shape:
        return g, g
    return g, g.sum(axis=0)


# multiply_scalar

def _check_multiply_scalar(inputs, attrs):
    _require("scalar" in attrs and np.isfinite(attrs["scalar"]), "multiply_scalar needs a finite scalar")


def _forward_multiply_scalar(inputs, attrs):
    return inputs[0].data * float(attrs["scalar"]), {}


def _backward_multiply_scalar(g, node):
    return (g * float(node.attrs["scalar"]),)


# relu

def _forward_relu(inputs, attrs):
    x = inputs[0].data
    return np.maximum(x, 0.0), {"positive": x > 0}


def _backward_relu(g, node):
    return (g * node.cached_values["positive"],)


# embedding_lookup

def _check_embedding(inputs, attrs):
    table = inputs[0]
    _require(table.data.ndim == 2, "embedding table must be 2-d")
    attrs["ids"] = _int_index(attrs.get("ids", ()), table.shape[0], "ids")


def _forward_embedding(inputs, attrs):
    return inputs[0].data[attrs["ids"]], {}


def _backward_embedding(g, node):
    grad = np.zeros_like(node.inputs[0].data)
    np.add.at(grad, node.attrs["ids"], g)
    return (grad,)


# log_softmax_rows

def _check_rows(inputs, attrs):
    _require(inputs[0].data.ndim == 2, "row-wise op needs a 2-d input")


def _forward_log_softmax(inputs, attrs):
    out = special.log_softmax(inputs[0].data, axis=1)
    return out, {"probs": np.exp(out)}


def _backward_log_softmax(g, node):
    probs = node.cached_values["probs"]
    return (g - probs * g.sum(axis=1, keepdims=True),)


# gather_rows: one entry per row

def _check_gather(inputs, attrs):
    x = inputs[0]
    _require(x.data.ndim == 2, "gather_rows needs a 2-d input")
    targets = _int_index(attrs.get("targets", ()), x.shape[1], "targets")
    _require(targets.shape[0] == x.shape[0], "one target per row required")
    attrs["targets"] = targets


def _forward_gather(inputs, attrs):
    x = inputs[0].data
    return x[np.arange(x.shape[0]), attrs["targets"]], {}


def _backward_gather(g, node):
    x = node.inputs[0].data
    grad = np.zeros_like(x)
    grad[np.arange(x.shape[0]), node.attrs["targets"]] = g
    return (grad,)


# mean / sum

def _forward_mean(inputs, attrs):
    return np.array([inputs[0].data.mean()]), {}


def _backward_mean(g, node):
    x = node.inputs[0].data
    return (np.full_like(x, g[0] / x.size),)


def _forward_sum(inputs, attrs):
    return np.array([inputs[0].data.sum()]), {}


def _backward_sum(g, node):
    return (np.full_like(node.inputs[0].data, g[0]),)


# layer_scale: scalar tensor times a tensor, differentiable in both

def _check_layer_scale(inputs, attrs):
    x, s = inputs
    _require(s.size == 1, "layer_scale needs a scalar scale, got {}", s.shape)


def _forward_layer_scale(inputs, attrs):
    x, s = inputs
    return x.data * s.data[0], {}


def _backward_layer_scale(g, node):
    x, s = node.inputs
    return g * s.data[0], np.array([np.sum(g * x.data)]).reshape(s.data.shape)


# transpose

def _forward_transpose(inputs, attrs):
    return inputs[0].data.T, {}


def _backward_transpose(g, node):
    return (g.T,)


# slice_cols / concat_cols

def _check_slice(inputs, attrs):
    x = inputs[0]
    _require(x.data.ndim == 2, "slice_cols needs a 2-d input")
    start, stop = attrs.get("start"), attrs.get("stop")
    _require(start is not None and stop is not None and 0 <= start < stop <= x.shape[1],
             "bad column slice [{}, {}) for shape {}", start, stop, x.shape)


def _forward_slice(inputs, attrs):
    return inputs[0].data[:, attrs["start"]:attrs["stop"]], {}


def _backward_slice(g, node):
    grad = np.zeros_like(node.inputs[0].data)
    grad[:, node.attrs["start"]:node.attrs["stop"]] = g
    return (grad,)


def _check_concat(inputs, attrs):
    _require(len(inputs) >= 1, "concat_cols needs inputs")
    rows = inputs[0].shape[0]
    for t in inputs:
        _require(t.data.ndim == 2 and t.shape[0] == rows, "concat_cols needs 2-d inputs with equal rows")


def _forward_concat(inputs, attrs):
    return np.concatenate([t.data for t in inputs], axis=1), {}


def _backward_concat(g, node):
    bounds = np.cumsum([t.shape[1] for t in node.inputs])[:-1]
    return tuple(np.split(g, bounds, axis=1))


# masked_softmax_rows: softmax over the allowed entries, zero elsewhere

def _check_masked_softmax(inputs, attrs):
    x = inputs[0]
    _require(x.data.ndim == 2, "masked_softmax_rows needs a 2-d input")
    mask = np.asarray(attrs.get("mask"), dtype=bool)
    _require(mask.shape == x.data.shape, "mask shape {} does not match {}", mask.shape, x.shape)
    _require(bool(mask.any(axis=1).all()), "every row needs at least one allowed entry")
    attrs["mask"] = mask


def _forward_masked_softmax(inputs, attrs):
    mask = attrs["mask"]
    x = np.where(mask, inputs[0].data, -np.inf)
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=1, keepdims=True)
    return p, {"probs": p}


def _backward_masked_softmax(g, node):
    p = node.cached_values["probs"]
    return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)


# take: select entries along the first axis

def _check_take(inputs, attrs):
    x = inputs[0]
    attrs["indices"] = _int_index(attrs.get("indices", ()), x.shape[0], "indices")


def _forward_take(inputs, attrs):
    return inputs[0].data[attrs["indices"]], {}


def _backward_take(g, node):
    grad = np.zeros_like(node.inputs[0].data)
    np.add.at(grad, node.attrs["indices"], g)
    return (grad,)


# token_divergence: D(reference row || exp(input row)) per row

def _check_token_divergence(inputs, attrs):
    logq = inputs[0]
    _require(logq.data.ndim == 2, "token_divergence needs 2-d log-probabilities")
    ref = np.asarray(attrs.get("reference"), dtype=np.float64)
    _require(ref.shape == logq.data.shape, "reference shape {} does not match {}", ref.shape, logq.shape)
    _require(attrs.get("kind") in ("kl", "js"), "divergence kind must be 'kl' or 'js'")
    attrs["reference"] = ref


def row_kl(p, q, floor=EPSILON_FLOOR):
    """KL(p || q) per row; q is floored and renormalised first."""
    q = np.maximum(q, floor)
    q = q / q.sum(axis=-1, keepdims=True)
    return special.rel_entr(p, q).sum(axis=-1)


def row_js(p, q):
    m = 0.5 * (p + q)
    return 0.5 * (special.rel_entr(p, m).sum(axis=-1) + special.rel_entr(q, m).sum(axis=-1))


def _forward_token_divergence(inputs, attrs):
    p = attrs["reference"]
    q = np.exp(inputs[0].data)
    floor = attrs.get("floor", EPSILON_FLOOR)
    if attrs["kind"] == "kl":
        value = row_kl(p, q, floor)
    else:
        value = row_js(p, q)
    return value, {"q": q}


def _backward_token_divergence(g, node):
    p = node.attrs["reference"]
    q = node.cached_values["q"]
    logq = node.inputs[0].data
    if node.attrs["kind"] == "kl":
        # d/dl of sum p log p - sum p l + log sum exp(l), the renormalised form
        local = -p + q / q.sum(axis=1, keepdims=True)
    else:
        m = 0.5 * (p + q)
        with np.errstate(divide="ignore", invalid="ignore"):
            local = np.where(q > 0, 0.5 * q * (logq - np.log(m)), 0.0)
    return (g[:, None] * local,)


# entropy_rows: -sum exp(l) l per row

def _forward_entropy(inputs, attrs):
    logq = inputs[0].data
    q = np.exp(logq)
    return -(q * logq).sum(axis=1), {"q": q}


def _backward_entropy(g, node):
    q = node.cached_values["q"]
    logq = node.inputs[0].data
    return (g[:, None] * (-q * (logq + 1.0)),)


def _no_check(inputs, attrs):
    pass


_RULES = {
    OpKind.MATMUL: _Rule(2, _check_matmul, _forward_matmul, _backward_matmul),
    OpKind.ADD: _Rule(2, _check_add, _forward_add, _backward_add),
    OpKind.MULTIPLY_SCALAR: _Rule(1, _check_multiply_scalar, _forward_multiply_scalar, _backward_multiply_scalar),
    OpKind.RELU: _Rule(1, _no_check, _forward_relu, _backward_relu),
    OpKind.EMBEDDING_LOOKUP: _Rule(1, _check_embedding, _forward_embedding, _backward_embedding),
    OpKind.LOG_SOFTMAX_ROWS: _Rule(1, _check_rows, _forward_log_softmax, _backward_log_softmax),
    OpKind.GATHER_ROWS: _Rule(1, _check_gather, _forward_gather, _backward_gather),
    OpKind.MEAN: _Rule(1, _no_check, _forward_mean, _backward_mean),
    OpKind.SUM: _Rule(1, _no_check, _forward_sum, _backward_sum),
    OpKind.LAYER_SCALE: _Rule(2, _check_layer_scale, _forward_layer_scale, _backward_layer_scale),
    OpKind.TRANSPOSE: _Rule(1, _check_rows, _forward_transpose, _backward_transpose),
    OpKind.SLICE_COLS: _Rule(1, _check_slice, _forward_slice, _backward_slice),
    OpKind.CONCAT_COLS: _Rule(None, _check_concat, _forward_concat, _backward_concat),
    OpKind.MASKED_SOFTMAX_ROWS: _Rule(1, _check_masked_softmax, _forward_masked_softmax, _backward_masked_softmax),
    OpKind.TAKE: _Rule(1, _check_take, _forward_take, _backward_take),
    OpKind.TOKEN_DIVERGENCE: _Rule(1, _check_token_divergence, _forward_token_divergence, _backward_token_divergence),
    OpKind.ENTROPY_ROWS: _Rule(1, _check_rows, _forward_entropy, _backward_entropy),
}


# --------------------------------------------------------------------------- #
# functional shorthands
# --------------------------------------------------------------------------- #

def matmul(a, b):
    return forward_op(OpKind.MATMUL, (a, b))


def add(a, b):
    return forward_op(OpKind.ADD, (a, b))


def multiply_scalar(x, scalar):
    return forward_op(OpKind.MULTIPLY_SCALAR, (x,), scalar=scalar)


def relu(x):
    return forward_op(OpKind.RELU, (x,))


def embedding_lookup(table, ids):
    return forward_op(OpKind.EMBEDDING_LOOKUP, (table,), ids=ids)


def log_softmax_rows(x):
    return forward_op(OpKind.LOG_SOFTMAX_ROWS, (x,))


def gather_rows(x, targets):
    return forward_op(OpKind.GATHER_ROWS, (x,), targets=targets)


def mean(x):
    return forward_op(OpKind.MEAN, (x,))


def total(x):
    return forward_op(OpKind.SUM, (x,))


def layer_scale(x, scale):
    return forward_op(OpKind.LAYER_SCALE, (x, scale))


def transpose(x):
    return forward_op(OpKind.TRANSPOSE, (x,))


def slice_cols(x, start, stop):
    return forward_op(OpKind.SLICE_COLS, (x,), start=start, stop=stop)


def concat_cols(tensors):
    return forward_op(OpKind.CONCAT_COLS, tensors)


def masked_softmax_rows(x, mask):
    return forward_op(OpKind.MASKED_SOFTMAX_ROWS, (x,), mask=mask)


def take(x, indices):
    return forward_op(OpKind.TAKE, (x,), indices=indices)


def token_divergence(logq, reference, kind, floor=EPSILON_FLOOR):
    return forward_op(OpKind.TOKEN_DIVERGENCE, (logq,), reference=reference, kind=kind, floor=floor)


def entropy_rows(logq):
    return forward_op(OpKind.ENTROPY_ROWS, (logq,))
