import math
import unittest

import numpy as np

import mergeforge as mf
from mergeforge.model import BOS, EOS, VOCAB_SIZE, decode_tokens, encode_prompt, parameter_count
from tests.models.tiny import tiny_config, tiny_model


def reference_next_token(params, context):
    """Straight-line numpy forward pass for the last position of ``context``."""
    config = params.config
    w = dict(params.items())
    n = len(context)
    x = w["embed.tok_emb"][np.asarray(context)] + w["embed.pos_emb"][np.arange(n)]
    causal = np.tril(np.ones((n, n), dtype=bool))
    dh = config.d_model // config.n_heads
    for i in range(config.n_layers):
        p = "block_{}.".format(i)
        q, k, v = x @ w[p + "attn_wq"], x @ w[p + "attn_wk"], x @ w[p + "attn_wv"]
        heads = []
        for h in range(config.n_heads):
            cols = slice(h * dh, (h + 1) * dh)
            scores = np.where(causal, q[:, cols] @ k[:, cols].T / math.sqrt(dh), -np.inf)
            weights = np.exp(scores - scores.max(axis=1, keepdims=True))
            weights /= weights.sum(axis=1, keepdims=True)
            heads.append(weights @ v[:, cols])
        x = x + np.concatenate(heads, axis=1) @ w[p + "attn_wo"] + w[p + "attn_bo"]
        hidden = np.maximum(x @ w[p + "mlp_w1"] + w[p + "mlp_b1"], 0.0)
        x = x + hidden @ w[p + "mlp_w2"] + w[p + "mlp_b2"]
    logits = x[-1] @ w["head.out_w"] + w["head.out_b"]
    probs = np.exp(logits - logits.max())
    return probs / probs.sum()


class TestInitModel(unittest.TestCase):

    def test_deterministic(self):
        a, b = tiny_model(seed=4), tiny_model(seed=4)
        self.assertEqual(a.manifest_hash, b.manifest_hash)
        self.assertTrue(a.equal(b))

    def test_seed_changes_data_not_manifest(self):
        a, b = tiny_model(seed=4), tiny_model(seed=5)
        self.assertEqual(a.manifest_hash, b.manifest_hash)
        self.assertFalse(a.equal(b))

    def test_default_parameter_count(self):
        # embed 259*64 + 64*64, two blocks of 4*64^2 + 64 + 2*64*256 + 256 + 64, head 64*259 + 259
        expected = 20672 + 2 * 49536 + 16835
        self.assertEqual(parameter_count(mf.ModelConfig()), expected)
        self.assertEqual(mf.init_model(mf.ModelConfig(), 0).size, expected)

    def test_layer_names(self):
        params = tiny_model(n_layers=2)
        self.assertEqual(params.layer_names, ["embed", "block_0", "block_1", "head"])

    def test_invalid_config(self):
        with self.assertRaises(ValueError):
            mf.ModelConfig(d_model=10, n_heads=4)
        with self.assertRaises(ValueError):
            mf.ModelConfig(vocab_size=100)


class TestParameterSet(unittest.TestCase):

    def test_duplicate_names(self):
        with self.assertRaises(ValueError):
            mf.ParameterSet([("a", [("w", [1.0])]), ("a", [("v", [2.0])])])
        with self.assertRaises(ValueError):
            mf.ParameterSet([("a", [("w", [1.0]), ("w", [2.0])])])

    def test_read_only(self):
        params = tiny_model()
        with self.assertRaises(ValueError):
            params["head.out_b"][0] = 1.0

    def test_layer_slices_tile_flat(self):
        params = tiny_model()
        slices = list(params.layer_slices().values())
        self.assertEqual(slices[0].start, 0)
        self.assertEqual(slices[-1].stop, params.size)
        for left, right in zip(slices, slices[1:]):
            self.assertEqual(left.stop, right.start)

    def test_from_flat_round_trip(self):
        params = tiny_model()
        again = params.from_flat(params.flat())
        self.assertTrue(params.equal(again))
        with self.assertRaises(ValueError):
            params.from_flat(np.zeros(params.size + 1))

    def test_incompatible(self):
        with self.assertRaises(mf.ManifestMismatch):
            tiny_model() + tiny_model(d_model=4)


class TestForward(unittest.TestCase):

    def setUp(self):
        self.params = tiny_model(seed=2)
        self.context = encode_prompt("hello")

    def test_distribution_normalised(self):
        dist = mf.next_token_distribution(self.params, self.context)
        self.assertEqual(dist.probs.shape, (VOCAB_SIZE,))
        self.assertAlmostEqual(float(dist.probs.sum()), 1.0, delta=1e-9)

    def test_zero_head_is_uniform(self):
        zeroed = self.params.replace({"head.out_w": np.zeros((8, VOCAB_SIZE)),
                                      "head.out_b": np.zeros(VOCAB_SIZE)})
        dist = mf.next_token_distribution(zeroed, self.context)
        np.testing.assert_allclose(dist.probs, np.full(VOCAB_SIZE, 1.0 / VOCAB_SIZE), rtol=0, atol=1e-15)

    def test_matches_reference_forward(self):
        params = tiny_model(seed=7, n_layers=2)
        dist = mf.next_token_distribution(params, self.context)
        np.testing.assert_allclose(dist.probs, reference_next_token(params, self.context), rtol=0, atol=1e-12)

    def test_packed_batch_is_block_diagonal(self):
        seqs = [encode_prompt("ab"), encode_prompt("xyz1"), [BOS]]
        logp, batch = mf.forward_logprobs(self.params, seqs)
        for seq, offset in zip(seqs, batch.offsets):
            alone, _ = mf.forward_logprobs(self.params, [seq])
            np.testing.assert_allclose(logp.data[offset:offset + len(seq)], alone.data, rtol=0, atol=1e-12)

    def test_context_too_long(self):
        with self.assertRaises(ValueError):
            mf.next_token_distribution(self.params, [BOS] * 25)
        with self.assertRaises(ValueError):
            mf.greedy_generate(self.params, [BOS] * 25, 4)

    def test_one_new_token(self):
        tokens, dists = mf.greedy_generate(self.params, self.context, max_new_tokens=1)
        self.assertEqual(len(tokens), 1)
        self.assertEqual(len(dists), 1)
        self.assertEqual(tokens[0], dists[0].argmax())

    def test_generation_respects_limits(self):
        tokens, dists = mf.greedy_generate(self.params, self.context, max_new_tokens=40)
        self.assertEqual(len(tokens), len(dists))
        self.assertLessEqual(len(self.context) + len(tokens) - 1, self.params.config.max_seq_len)
        if EOS in tokens:
            self.assertEqual(tokens.index(EOS), len(tokens) - 1)


class TestTokens(unittest.TestCase):

    def test_decode_stops_at_eos(self):
        self.assertEqual(decode_tokens([BOS, 97, 98, EOS, 99]), "ab")

    def test_encode_prompt(self):
        self.assertEqual(encode_prompt("ab"), [BOS, 97, 98])

    def test_argmax_ties_lowest_index(self):
        dist = mf.TokenDistribution(np.array([0.25, 0.5, 0.25, 0.0]) * 1.0)
        self.assertEqual(dist.argmax(), 1)
        tie = mf.TokenDistribution(np.array([0.5, 0.5]))
        self.assertEqual(tie.argmax(), 0)

    def test_invalid_distribution(self):
        with self.assertRaises(ArithmeticError):
            mf.TokenDistribution(np.array([0.5, 0.6]))


if __name__ == '__main__':
    unittest.main()
