"""
Tests for the patch-transformer noise predictor
"""

import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from src.bench import build_vocabulary, catalog
from src.denoiser import cross_attention, in_scope, init_model, param_count, position_mask, select_params
from src.diffusion import make_schedule, q_sample
from src.errors import ShapeError
from src.forgetting import resteer_loss
from src.models import DenoiserConfig, ParamScope
from src.selftest import miniature_model
from src.tensor import Graph, Tensor, backward, no_grad, randn, rng_stream
from src.text import Vocabulary, tokenize_batch


def _noised(model, seed=0, batch=2):
    rng = rng_stream(seed, "test")
    sched = make_schedule(20, 1e-4, 0.02)
    x0 = Tensor(rng.uniform(-1, 1, (batch,) + model.cfg.image_shape))
    t = rng.integers(0, sched.T, size=batch)
    x_t = q_sample(x0, t, randn(x0.shape, rng), sched)
    ids = tokenize_batch(["a photo of kiki"] * batch, model.vocab, model.cfg.max_len)
    return x_t, t, ids


class TestForward(unittest.TestCase):
    """Shapes and attention records"""

    def setUp(self):
        self.model = miniature_model()

    def test_output_matches_input_shape(self):
        """The predicted noise has the image shape"""
        x_t, t, ids = _noised(self.model)
        with no_grad():
            eps_hat, record = self.model.forward(x_t, t, self.model.encode_ids(ids))
        self.assertEqual(eps_hat.shape, (2, 16, 16, 3))
        self.assertIsNone(record)

    def test_attention_rows_are_distributions(self):
        """Every recorded map row sums to one over context positions"""
        x_t, t, ids = _noised(self.model)
        with no_grad():
            _, record = self.model.forward(x_t, t, self.model.encode_ids(ids), record=True)
        self.assertEqual(record.num_blocks, 2)
        self.assertEqual(record.heads, 2)
        for probs in record.maps:
            self.assertEqual(probs.shape, (2, 2, 16, 4))
            assert_allclose(probs.numpy().sum(axis=-1), 1.0, atol=1e-12)

    def test_attention_mass_of_every_position_is_one(self):
        """Masking every context position gives mass one"""
        x_t, t, ids = _noised(self.model)
        with no_grad():
            _, record = self.model.forward(x_t, t, self.model.encode_ids(ids), record=True)
        self.assertAlmostEqual(record.mass(np.ones((2, 4))), 1.0, places=12)

    def test_rejects_wrong_image_shape(self):
        """Images that do not match the configuration raise ShapeError"""
        ctx = self.model.encode_prompts(["a photo of kiki"])
        with self.assertRaises(ShapeError):
            self.model.forward(Tensor(np.zeros((1, 8, 8, 3))), [0], ctx)

    def test_position_mask(self):
        """Shared and per-item position lists build the same kind of mask"""
        assert_array_equal(position_mask([1, 3], 2, 4), [[0, 1, 0, 1], [0, 1, 0, 1]])
        assert_array_equal(position_mask([[0], [2]], 2, 4), [[1, 0, 0, 0], [0, 0, 1, 0]])
        with self.assertRaises(ShapeError):
            position_mask([4], 1, 4)


class TestParameters(unittest.TestCase):
    """Initialization, scopes and state handling"""

    def test_seeded_initialization(self):
        """Equal seeds give equal weights, different seeds do not"""
        a, b, c = miniature_model(0), miniature_model(0), miniature_model(1)
        self.assertEqual(a.fingerprint(), b.fingerprint())
        self.assertNotEqual(a.fingerprint(), c.fingerprint())

    def test_scopes(self):
        """CA_ONLY holds the cross-attention projections; FULL excludes text tables"""
        self.assertTrue(in_scope("blocks.1.xattn.k.weight", ParamScope.CA_ONLY))
        self.assertTrue(in_scope("blocks.0.xattn.o.bias", ParamScope.CA_ONLY))
        self.assertFalse(in_scope("blocks.0.attn.k.weight", ParamScope.CA_ONLY))
        self.assertFalse(in_scope("blocks.0.norm2.weight", ParamScope.CA_ONLY))
        self.assertTrue(in_scope("head.weight", ParamScope.FULL))
        self.assertFalse(in_scope("text.token_embedding", ParamScope.FULL))

    def test_cross_attention_share_of_default_model(self):
        """Cross-attention weights are a small share of the default denoiser"""
        cfg = DenoiserConfig()
        model = init_model(cfg, build_vocabulary(catalog()), seed=0)
        full = model.num_parameters(select_params(model, ParamScope.FULL))
        ca = model.num_parameters(select_params(model, ParamScope.CA_ONLY))
        self.assertEqual(full, param_count(cfg))
        self.assertEqual(len(select_params(model, ParamScope.CA_ONLY)), 5 * cfg.blocks)
        self.assertLess(ca / full, 0.15)

    def test_copy_is_independent(self):
        """Loading new weights into a copy leaves the original alone"""
        model = miniature_model()
        clone = model.copy()
        name = "blocks.0.xattn.q.weight"
        clone.load_state({name: np.zeros(model.params[name].shape)})
        self.assertFalse(np.array_equal(model.params[name].data, clone.params[name].data))
        self.assertNotEqual(model.fingerprint(), clone.fingerprint())

    def test_load_state_checks_shapes(self):
        """Wrong shapes and unknown names are refused"""
        model = miniature_model()
        with self.assertRaises(ShapeError):
            model.load_state({"head.bias": np.zeros(3)})
        with self.assertRaises(KeyError):
            model.load_state({"nope": np.zeros(3)})


class TestCrossAttention(unittest.TestCase):
    """cross_attention on hand-built weights"""

    def setUp(self):
        rng = rng_stream(5, "test")
        self.heads, self.d_model, self.d_ctx = 2, 4, 3
        self.weights = {
            "q.weight": Tensor(rng.standard_normal((self.d_model, self.d_model))),
            "k.weight": Tensor(rng.standard_normal((self.d_ctx, self.d_model))),
            "v.weight": Tensor(rng.standard_normal((self.d_ctx, self.d_model))),
            "o.weight": Tensor(rng.standard_normal((self.d_model, self.d_model))),
            "o.bias": Tensor(np.zeros(self.d_model)),
        }
        self.q_tokens = Tensor(rng.standard_normal((2, 5, self.d_model)))
        self.ctx = Tensor(rng.standard_normal((2, 3, self.d_ctx)))

    def _with(self, **replaced):
        weights = dict(self.weights)
        for key, value in replaced.items():
            weights[key.replace("_", ".")] = Tensor(value)
        return weights

    def _loop(self):
        w = {k: v.numpy() for k, v in self.weights.items()}
        x, c = self.q_tokens.numpy(), self.ctx.numpy()
        n, m, _ = x.shape
        length = c.shape[1]
        d_head = self.d_model // self.heads
        probs = np.zeros((n, self.heads, m, length))
        merged = np.zeros((n, m, self.d_model))
        for b in range(n):
            q, k, v = x[b] @ w["q.weight"], c[b] @ w["k.weight"], c[b] @ w["v.weight"]
            for h in range(self.heads):
                cols = slice(h * d_head, (h + 1) * d_head)
                for i in range(m):
                    scores = np.array([sum(q[i, cols][e] * k[j, cols][e] for e in range(d_head))
                                       for j in range(length)]) / np.sqrt(d_head)
                    row = np.exp(scores - scores.max())
                    row /= row.sum()
                    probs[b, h, i] = row
                    for e in range(d_head):
                        merged[b, i, h * d_head + e] = sum(row[j] * v[j, cols][e] for j in range(length))
        return merged @ w["o.weight"] + w["o.bias"], probs

    def test_matches_loop(self):
        """Output and per-head maps agree with an element-wise loop within 1e-12"""
        out, probs = cross_attention(self.q_tokens, self.ctx, self.weights, self.heads)
        want_out, want_probs = self._loop()
        assert_allclose(probs.numpy(), want_probs, rtol=0, atol=1e-12)
        assert_allclose(out.numpy(), want_out, rtol=0, atol=1e-12)

    def test_zero_keys_give_uniform_rows(self):
        """All-zero keys spread every query evenly over the context tokens"""
        _, probs = cross_attention(self.q_tokens, self.ctx, self._with(k_weight=np.zeros((3, 4))), self.heads)
        assert_allclose(probs.numpy(), np.full((2, 2, 5, 3), 1.0 / 3), rtol=0, atol=1e-15)

    def test_zero_values_give_zero_output(self):
        """V = 0 zeroes the output and leaves the attention map as it was"""
        _, probs = cross_attention(self.q_tokens, self.ctx, self.weights, self.heads)
        out, zero_probs = cross_attention(self.q_tokens, self.ctx, self._with(v_weight=np.zeros((3, 4))),
                                          self.heads)
        assert_array_equal(out.numpy(), np.zeros((2, 5, 4)))
        assert_array_equal(zero_probs.numpy(), probs.numpy())

    def test_shared_context_broadcasts(self):
        """An (L, d_ctx) context is shared by every query batch item"""
        shared = Tensor(self.ctx.numpy()[0])
        out, probs = cross_attention(self.q_tokens, shared, self.weights, self.heads)
        self.assertEqual(out.shape, (2, 5, 4))
        self.assertEqual(probs.shape, (2, 2, 5, 3))

    def test_heads_must_divide_width(self):
        """A head count that does not divide d_model raises ShapeError"""
        with self.assertRaises(ShapeError):
            cross_attention(self.q_tokens, self.ctx, self.weights, 3)


class TestValueProjectionGradient(unittest.TestCase):
    """An attention-map loss cannot move the last block's value projection"""

    def _v_gradients(self, model):
        names = [f"blocks.{i}.xattn.v.weight" for i in range(model.cfg.blocks)]
        model.set_trainable(names)
        x_t, t, ids = _noised(model)
        with Graph() as graph:
            _, record = model.forward(x_t, t, model.encode_ids(ids), record=True)
            loss = resteer_loss(record, [3])
        grads = backward(graph, loss, [model.params[n] for n in names])
        return [grads[model.params[n]] for n in names]

    def test_last_block_value_gradient_is_zero(self):
        """Only earlier blocks' value projections receive gradient"""
        first, last = self._v_gradients(miniature_model())
        self.assertTrue(np.any(first != 0.0))
        assert_array_equal(last, np.zeros_like(last))

    def test_single_block_model(self):
        """With one block the value projection gradient is exactly zero"""
        cfg = DenoiserConfig(d_model=8, heads=2, blocks=1, d_ctx=4, time_dim=4, patch=4, mlp_ratio=2, max_len=4)
        vocab = Vocabulary.build(["a", "photo", "of", "kiki"], placeholders=1)
        (only,) = self._v_gradients(init_model(cfg, vocab, seed=2))
        assert_array_equal(only, np.zeros_like(only))


if __name__ == '__main__':
    unittest.main()
