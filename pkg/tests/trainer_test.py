import os
import unittest
from unittest import mock

import numpy as np

import mergeforge as mf
from mergeforge import autodiff as ad
from mergeforge.model import BOS, EOS
from mergeforge.tasks import CLASSIFICATION, GENERATION, Example, TaskDataset
from mergeforge.trainer import Adam, TrainLog, completion_loss, training_sequence
from tests.models.tiny import nudged, tiny_model

SLOW = os.environ.get("MERGEFORGE_SLOW_TESTS") == "1"


class TestAdam(unittest.TestCase):

    def test_first_step(self):
        adam = Adam(0.1)
        out = adam.step(np.array([1.0]), np.array([2.0]))
        self.assertEqual(out[0], 1.0 - 0.1 * 2.0 / (2.0 + 1e-8))

    def test_zero_gradient_keeps_value(self):
        adam = Adam(0.1)
        value = np.array([0.5, -2.0])
        np.testing.assert_array_equal(adam.step(value, np.zeros(2)), value)


class TestCompletionLoss(unittest.TestCase):

    def test_training_sequence(self):
        tokens, start = training_sequence("ab", "c")
        self.assertEqual(tokens, [BOS, 97, 98, 99, EOS])
        self.assertEqual(start, 2)

    def test_mean_over_completion_tokens(self):
        params = tiny_model(seed=3)
        a = completion_loss(params, [Example("abc", "x")]).item()
        b = completion_loss(params, [Example("abc", "x"), Example("abc", "x")]).item()
        self.assertAlmostEqual(a, b, places=12)

    def test_prompt_positions_get_no_gradient(self):
        params = tiny_model(seed=3)
        examples = [Example("abc", "xy"), Example("hello", "z")]
        original = ad.log_softmax_rows
        shifts = []

        def shifted(logits):
            shift = ad.active_tape().watch(ad.Tensor(np.zeros(logits.shape), name="logit_shift"))
            shifts.append(shift)
            return original(ad.add(logits, shift))

        with ad.Tape() as tape, mock.patch.object(ad, "log_softmax_rows", shifted):
            loss = completion_loss(params, examples)
            grad = tape.backward(loss)["logit_shift"]
        self.assertEqual(len(shifts), 1)
        offset = 0
        for ex in examples:
            tokens, start = training_sequence(ex.prompt, ex.answer)
            length = len(tokens) - 1
            np.testing.assert_array_equal(grad[offset:offset + start], 0.0)
            self.assertTrue(np.all(np.abs(grad[offset + start:offset + length]).sum(axis=1) > 0.0))
            offset += length
        self.assertEqual(offset, grad.shape[0])

    def test_uniform_head_loss(self):
        params = tiny_model()
        vocab = params["head.out_b"].size
        zeroed = params.replace({"head.out_w": np.zeros(params["head.out_w"].shape),
                                 "head.out_b": np.zeros(vocab)})
        loss = completion_loss(zeroed, [Example("q", "ab")]).item()
        self.assertAlmostEqual(loss, np.log(vocab), places=12)


class TestFinetune(unittest.TestCase):

    def setUp(self):
        self.base = tiny_model(seed=1, max_seq_len=48)
        spec = mf.TaskSpec(CLASSIFICATION, "parity", n_train=8, n_validation=2, n_test=2)
        self.task = mf.make_classification_task(spec, 0)
        self.config = mf.TrainConfig(learning_rate=1e-2, batch_size=4, epochs=2)

    def test_empty_train_split_returns_base(self):
        examples = [Example("a", "even"), Example("b", "odd")]
        task = TaskDataset("empty", CLASSIFICATION, examples, {"validation": [0], "test": [1]})
        log = TrainLog()
        tuned = mf.finetune(self.base, task, self.config, log=log)
        self.assertTrue(tuned.equal(self.base))
        self.assertEqual(log.steps, 0)

    def test_deterministic(self):
        a = mf.finetune(self.base, self.task, self.config)
        b = mf.finetune(self.base, self.task, self.config)
        self.assertTrue(a.equal(b))
        self.assertFalse(a.equal(self.base))

    def test_log(self):
        log = TrainLog()
        mf.finetune(self.base, self.task, self.config, log=log)
        self.assertEqual(log.task_id, "parity")
        self.assertEqual(log.steps, 4)
        self.assertEqual(len(log.epoch_losses), 2)

    def test_rejects_long_sequences_before_training(self):
        examples = [Example("ab", "even"), Example("x" * 60, "odd")]
        task = TaskDataset("long", CLASSIFICATION, examples, {"train": [0, 1]})
        log = TrainLog()
        with self.assertRaises(mf.ContractViolation):
            mf.finetune(self.base, task, self.config, log=log)
        self.assertEqual(log.steps, 0)

    def test_invalid_config(self):
        with self.assertRaises(ValueError):
            mf.TrainConfig(learning_rate=0.0)
        with self.assertRaises(ValueError):
            mf.TrainConfig(epochs=0)


class TestTaskVectors(unittest.TestCase):

    def setUp(self):
        self.base = tiny_model(seed=2)

    def test_unchanged_model_has_zero_vector(self):
        tau = mf.task_vector(self.base, self.base, "same")
        self.assertEqual(tau.norm(), 0.0)
        self.assertEqual(tau.task_id, "same")

    def test_reconstruct_bitwise(self):
        tuned = nudged(self.base, 5, scale=0.3)
        tau = mf.task_vector(self.base, tuned)
        self.assertTrue(mf.reconstruct(self.base, tau).equal(tuned))
        self.assertEqual(tau.layer_names, self.base.layer_names)

    def test_incompatible(self):
        with self.assertRaises(mf.ManifestMismatch):
            mf.task_vector(self.base, tiny_model(n_layers=2))


@unittest.skipUnless(SLOW, "set MERGEFORGE_SLOW_TESTS=1")
class TestTrainingQuality(unittest.TestCase):

    def test_parity_accuracy(self):
        base = mf.init_model(mf.ModelConfig(), 0)
        task = mf.make_classification_task(mf.TaskSpec(CLASSIFICATION, "parity"), 0)
        tuned = mf.finetune(base, task, mf.TrainConfig(learning_rate=3e-3, epochs=40))
        self.assertGreaterEqual(mf.perf(tuned, task).value, 0.95)

    def test_overfit_single_example(self):
        base = tiny_model(seed=0, d_model=16)
        examples = [Example("echo", "hi")]
        task = TaskDataset("echo", GENERATION, examples, {"train": [0]})
        log = TrainLog()
        mf.finetune(base, task, mf.TrainConfig(learning_rate=1e-2, batch_size=1, epochs=300), log=log)
        self.assertLess(log.epoch_losses[-1], 1e-3)


if __name__ == '__main__':
    unittest.main()
