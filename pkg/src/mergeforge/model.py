"""
Byte-level decoder-only transformer with an explicitly layered parameter set.

Layers, in canonical order::

    embed     tok_emb (V, d), pos_emb (S, d)
    block_i   attn_wq, attn_wk, attn_wv, attn_wo (d, d), attn_bo (d,),
              mlp_w1 (d, 4d), mlp_b1 (4d,), mlp_w2 (4d, d), mlp_b2 (d,)
    head      out_w (d, V), out_b (V,)

Each block is ``x + attn(x)`` followed by ``x + mlp(x)`` with a ReLU MLP.
Several sequences are packed into one batch and attend only within
themselves (block-diagonal causal mask).
"""

import hashlib
import json
import math
from collections import OrderedDict, namedtuple
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, ManifestMismatch, NumericError
from .streams import substream

N_BYTES = 256
BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259
MLP_RATIO = 4

DEFAULT_MAX_NEW_TOKENS = 32


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 64

    def __post_init__(self):
        if self.vocab_size != VOCAB_SIZE:
            raise ContractViolation("vocab_size must be {} (bytes + BOS/EOS/PAD)".format(VOCAB_SIZE))
        if min(self.d_model, self.n_layers, self.n_heads) < 1:
            raise ContractViolation("d_model, n_layers and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ContractViolation("d_model must be divisible by n_heads")
        if self.max_seq_len < 2:
            raise ContractViolation("max_seq_len must be at least 2")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        return cls(**{k: int(v) for k, v in values.items()})


def parameter_count(config):
    """Closed-form parameter count of a model built from ``config``."""
    d, v, s = config.d_model, config.vocab_size, config.max_seq_len
    hidden = MLP_RATIO * d
    embed = v * d + s * d
    block = 4 * d * d + d + d * hidden + hidden + hidden * d + d
    head = d * v + v
    return embed + config.n_layers * block + head


def layer_names(config):
    return ["embed"] + ["block_{}".format(i) for i in range(config.n_layers)] + ["head"]


class ParameterSet:
    """Named, shaped, ordered weight buffers of one model.

    Buffers are read-only numpy arrays; every arithmetic helper returns a
    new ParameterSet.
    """

    def __init__(self, layers, config=None):
        seen_layers = set()
        seen_params = set()
        built = []
        for layer_name, params in layers:
            if layer_name in seen_layers:
                raise ContractViolation("duplicate layer name: {}".format(layer_name))
            seen_layers.add(layer_name)
            entries = []
            for param_name, values in params:
                full = "{}.{}".format(layer_name, param_name)
                if full in seen_params:
                    raise ContractViolation("duplicate parameter name: {}".format(full))
                seen_params.add(full)
                arr = np.array(values, dtype=np.float64)
                if arr.size == 0:
                    raise ContractViolation("empty parameter: {}".format(full))
                if not np.all(np.isfinite(arr)):
                    raise NumericError("non-finite values in {}".format(full))
                arr.flags.writeable = False
                entries.append((param_name, arr))
            built.append((layer_name, tuple(entries)))
        if not built:
            raise ContractViolation("a parameter set needs at least one layer")
        self._layers = tuple(built)
        self.config = config
        self._flat = None
        self._tensors = None
        self._hash = None

    # structure

    @property
    def layers(self):
        return self._layers

    @property
    def layer_names(self):
        return [name for name, _ in self._layers]

    def items(self):
        for layer_name, params in self._layers:
            for param_name, arr in params:
                yield "{}.{}".format(layer_name, param_name), arr

    @property
    def names(self):
        return [name for name, _ in self.items()]

    def __getitem__(self, name):
        for full, arr in self.items():
            if full == name:
                return arr
        raise KeyError(name)

    def manifest(self):
        return [{"name": layer_name,
                 "params": [{"name": p, "shape": list(arr.shape)} for p, arr in params]}
                for layer_name, params in self._layers]

    @property
    def manifest_hash(self):
        if self._hash is None:
            text = json.dumps(self.manifest(), sort_keys=True, separators=(",", ":"))
            self._hash = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return self._hash

    @property
    def size(self):
        return sum(arr.size for _, arr in self.items())

    def is_compatible(self, other):
        return self.manifest_hash == other.manifest_hash

    def require_compatible(self, other):
        if not self.is_compatible(other):
            raise ManifestMismatch("parameter sets have different names or shapes")

    # flat views

    def flat(self):
        if self._flat is None:
            flat = np.concatenate([arr.reshape(-1) for _, arr in self.items()])
            flat.flags.writeable = False
            self._flat = flat
        return self._flat

    def layer_slices(self):
        """``{layer name: slice}`` into :meth:`flat`; the slices tile it exactly."""
        slices = OrderedDict()
        start = 0
        for layer_name, params in self._layers:
            stop = start + sum(arr.size for _, arr in params)
            slices[layer_name] = slice(start, stop)
            start = stop
        return slices

    def from_flat(self, vector, config=None, cls=None):
        """A parameter set with this one's structure filled from ``vector``."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ContractViolation("flat vector has {} entries, expected {}".format(vector.size, self.size))
        layers = []
        start = 0
        for layer_name, params in self._layers:
            entries = []
            for param_name, arr in params:
                stop = start + arr.size
                entries.append((param_name, vector[start:stop].reshape(arr.shape)))
                start = stop
            layers.append((layer_name, entries))
        return (cls or ParameterSet)(layers, config=config if config is not None else self.config)

    def tensors(self):
        """Autodiff tensors named ``layer.param``; created once and reused."""
        if self._tensors is None:
            self._tensors = OrderedDict((name, ad.Tensor(arr, name=name)) for name, arr in self.items())
        return self._tensors

    # arithmetic

    def replace(self, updates):
        """Copy with some buffers (by full name) replaced."""
        unknown = set(updates) - set(self.names)
        if unknown:
            raise ContractViolation("unknown parameters: {}".format(sorted(unknown)))
        layers = []
        for layer_name, params in self._layers:
            entries = []
            for param_name, arr in params:
                full = "{}.{}".format(layer_name, param_name)
                new = np.asarray(updates.get(full, arr), dtype=np.float64)
                if new.shape != arr.shape:
                    raise ContractViolation("shape mismatch replacing {}".format(full))
                entries.append((param_name, new))
            layers.append((layer_name, entries))
        return type(self)(layers, config=self.config)

    def __add__(self, other):
        self.require_compatible(other)
        return self.from_flat(self.flat() + other.flat())

    def __sub__(self, other):
        self.require_compatible(other)
        return self.from_flat(self.flat() - other.flat())

    def scale(self, factor):
        return self.from_flat(self.flat() * float(factor))

    def equal(self, other):
        """Bitwise equality of structure and data."""
        return self.is_compatible(other) and np.array_equal(self.flat(), other.flat())

    def allclose(self, other, atol=1e-12):
        return self.is_compatible(other) and np.allclose(self.flat(), other.flat(), rtol=0.0, atol=atol)

    def norm(self):
        return float(np.linalg.norm(self.flat()))

    def __repr__(self):
        return "ParameterSet(layers={}, size={})".format(self.layer_names, self.size)


@dataclass(frozen=True)
class TokenDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = self.probs
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise NumericError("not a probability vector")

    def argmax(self):
        # numpy returns the lowest index among ties
        return int(np.argmax(self.probs))


def init_model(config, seed):
    """Deterministic initial parameters for ``config``."""
    rng = substream(seed, "init_model")
    d, v, s = config.d_model, config.vocab_size, config.max_seq_len
    hidden = MLP_RATIO * d
    residual = 1.0 / math.sqrt(2 * config.n_layers)

    def normal(shape, std):
        return rng.normal(0.0, std, size=shape)

    layers = [("embed", [("tok_emb", normal((v, d), 0.1)),
                         ("pos_emb", normal((s, d), 0.1))])]
    for i in range(config.n_layers):
        layers.append(("block_{}".format(i), [
            ("attn_wq", normal((d, d), 1.0 / math.sqrt(d))),
            ("attn_wk", normal((d, d), 1.0 / math.sqrt(d))),
            ("attn_wv", normal((d, d), 1.0 / math.sqrt(d))),
            ("attn_wo", normal((d, d), residual / math.sqrt(d))),
            ("attn_bo", np.zeros(d)),
            ("mlp_w1", normal((d, hidden), 1.0 / math.sqrt(d))),
            ("mlp_b1", np.zeros(hidden)),
            ("mlp_w2", normal((hidden, d), residual / math.sqrt(hidden))),
            ("mlp_b2", np.zeros(d)),
        ]))
    layers.append(("head", [("out_w", normal((d, v), 1.0 / math.sqrt(d))),
                            ("out_b", np.zeros(v))]))
    return ParameterSet(layers, config=config)


# --------------------------------------------------------------------------- #
# tokens
# --------------------------------------------------------------------------- #

def encode_text(text):
    return list(text.encode("utf-8"))


def encode_prompt(prompt):
    return [BOS] + encode_text(prompt)


def decode_tokens(tokens):
    """Text of ``tokens`` up to the first EOS, special tokens dropped."""
    out = bytearray()
    for tok in tokens:
        if tok == EOS:
            break
        if tok < N_BYTES:
            out.append(tok)
    return out.decode("utf-8", errors="replace")


# --------------------------------------------------------------------------- #
# forward pass
# --------------------------------------------------------------------------- #

PackedBatch = namedtuple("PackedBatch", "ids positions mask offsets lengths")


def pack_sequences(sequences, config):
    """Concatenate sequences into one row batch with a block-diagonal causal mask."""
    if not sequences:
        raise ContractViolation("no sequences to pack")
    ids, positions, segments, offsets, lengths = [], [], [], [], []
    for seg, seq in enumerate(sequences):
        seq = list(seq)
        if not seq:
            raise ContractViolation("empty sequence")
        if len(seq) > config.max_seq_len:
            raise ContractViolation("sequence of length {} exceeds max_seq_len {}".format(
                len(seq), config.max_seq_len))
        if min(seq) < 0 or max(seq) >= config.vocab_size:
            raise ContractViolation("token outside the vocabulary")
        offsets.append(len(ids))
        lengths.append(len(seq))
        ids.extend(seq)
        positions.extend(range(len(seq)))
        segments.extend([seg] * len(seq))
    segments = np.asarray(segments)
    index = np.arange(len(ids))
    mask = (segments[:, None] == segments[None, :]) & (index[None, :] <= index[:, None])
    return PackedBatch(np.asarray(ids, dtype=np.intp), np.asarray(positions, dtype=np.intp),
                       mask, offsets, lengths)


def _attention(x, t, prefix, config, mask):
    q = ad.matmul(x, t[prefix + ".attn_wq"])
    k = ad.matmul(x, t[prefix + ".attn_wk"])
    v = ad.matmul(x, t[prefix + ".attn_wv"])
    dh = config.head_dim
    heads = []
    for h in range(config.n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = ad.slice_cols(q, lo, hi), ad.slice_cols(k, lo, hi), ad.slice_cols(v, lo, hi)
        scores = ad.multiply_scalar(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh))
        heads.append(ad.matmul(ad.masked_softmax_rows(scores, mask), vh))
    merged = heads[0] if len(heads) == 1 else ad.concat_cols(heads)
    return ad.add(ad.matmul(merged, t[prefix + ".attn_wo"]), t[prefix + ".attn_bo"])


def _mlp(x, t, prefix):
    hidden = ad.relu(ad.add(ad.matmul(x, t[prefix + ".mlp_w1"]), t[prefix + ".mlp_b1"]))
    return ad.add(ad.matmul(hidden, t[prefix + ".mlp_w2"]), t[prefix + ".mlp_b2"])


def forward_logprobs(params, sequences, tensors=None):
    """Next-token log-probabilities for every position of a packed batch.

    Row ``offsets[i] + j`` of the result is log M(. | sequences[i][:j+1]).
    Pass ``tensors`` (e.g. watched leaves) to override the parameter tensors.
    """
    config = params.config
    if config is None:
        raise ContractViolation("parameter set carries no model config")
    batch = pack_sequences(sequences, config)
    t = tensors if tensors is not None else params.tensors()
    x = ad.add(ad.embedding_lookup(t["embed.tok_emb"], batch.ids),
               ad.embedding_lookup(t["embed.pos_emb"], batch.positions))
    for i in range(config.n_layers):
        prefix = "block_{}".format(i)
        x = ad.add(x, _attention(x, t, prefix, config, batch.mask))
        x = ad.add(x, _mlp(x, t, prefix))
    logits = ad.add(ad.matmul(x, t["head.out_w"]), t["head.out_b"])
    return ad.log_softmax_rows(logits), batch


def next_token_distribution(params, context):
    """M(. | context; params) as a TokenDistribution."""
    with ad.paused():
        logp, _ = forward_logprobs(params, [context])
    probs = np.exp(logp.data[-1])
    return TokenDistribution(probs / probs.sum())


def greedy_generate(params, prompt, max_new_tokens=DEFAULT_MAX_NEW_TOKENS):
    """Greedy decoding from ``prompt`` (a token list starting with BOS).

    Returns the generated tokens (EOS included when emitted) and the
    distribution each one was chosen from. Generation also stops when the
    context reaches ``max_seq_len``.
    """
    if max_new_tokens < 1:
        raise ContractViolation("max_new_tokens must be at least 1")
    context = list(prompt)
    limit = params.config.max_seq_len
    if len(context) > limit:
        raise ContractViolation("prompt of length {} exceeds max_seq_len {}".format(len(context), limit))
    generated, dists = [], []
    for _ in range(max_new_tokens):
        dist = next_token_distribution(params, context)
        token = dist.argmax()
        generated.append(token)
        dists.append(dist)
        if token == EOS or len(context) == limit:
            break
        context.append(token)
    return generated, dists
