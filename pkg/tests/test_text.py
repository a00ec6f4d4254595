"""
Tests for the vocabulary, tokenizer and context encoder
"""

import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from src.errors import ConceptError, ShapeError, VocabularyError
from src.models import ConceptSpec
from src.selftest import miniature_model
from src.tensor import Graph, Tensor, backward, no_grad, sum_
from src.text import Vocabulary, target_positions, tokenize


class TestVocabulary(unittest.TestCase):
    """Vocabulary construction rules"""

    def test_build_orders_words_and_placeholders(self):
        """Pad first, words in first-seen order, then placeholder slots"""
        vocab = Vocabulary.build(["a", "photo", "a", "kiki"], placeholders=2)
        self.assertEqual(vocab.tokens, ["<pad>", "a", "photo", "kiki", "<v0>", "<v1>"])
        assert_array_equal(vocab.regular_ids(), [1, 2, 3])
        assert_array_equal(vocab.placeholder_slots([0, 3, 4, 5]), [-1, -1, 0, 1])

    def test_invalid_vocabularies(self):
        """Missing pad, duplicates and whitespace entries are rejected"""
        for tokens in (["a", "<pad>"], ["<pad>", "a", "a"], ["<pad>", "two words"]):
            with self.subTest(tokens=tokens):
                with self.assertRaises(VocabularyError):
                    Vocabulary(tokens)

    def test_text_round_trip(self):
        """Serialized vocabularies reload equal with the same digest"""
        vocab = Vocabulary.build(["a", "photo", "of", "kiki"])
        again = Vocabulary.from_text(vocab.to_text())
        self.assertEqual(again, vocab)
        self.assertEqual(again.digest(), vocab.digest())


class TestTokenizer(unittest.TestCase):
    """Whitespace tokenization with padding"""

    def setUp(self):
        self.vocab = Vocabulary.build(["a", "photo", "of", "kiki"], placeholders=1)

    def test_pads_to_length(self):
        """Short prompts are padded with index 0"""
        assert_array_equal(tokenize("a kiki", self.vocab, 4), [1, 4, 0, 0])

    def test_truncates_long_prompts(self):
        """Prompts longer than max_len keep their leading tokens"""
        assert_array_equal(tokenize("a photo of a kiki", self.vocab, 3), [1, 2, 3])

    def test_unknown_word(self):
        """Unknown words raise when checked and are dropped otherwise"""
        with self.assertRaises(VocabularyError):
            tokenize("a photo of zuzu", self.vocab, 4)
        assert_array_equal(tokenize("a zuzu", self.vocab, 4, checked=False), [1, 0, 0, 0])


class TestEncoder(unittest.TestCase):
    """Context embeddings from the miniature model"""

    def setUp(self):
        self.model = miniature_model()

    def test_shapes(self):
        """Single prompts give (L, d) and batches give (N, L, d)"""
        with no_grad():
            one = self.model.encode_prompts("a photo of kiki")
            many = self.model.encode_prompts(["a photo of kiki", "a photo of bobo", "kiki"])
        self.assertEqual(one.per_token.shape, (4, 4))
        self.assertEqual(one.pooled.shape, (4,))
        self.assertEqual(many.per_token.shape, (3, 4, 4))
        self.assertEqual(many.pooled.shape, (3, 4))
        self.assertEqual(many.batch, 3)

    def test_pooled_is_projected_mean_of_non_pad_tokens(self):
        """pooled = pooler(mean of token + position over non-pad positions)"""
        p = self.model.state_dict()
        with no_grad():
            ctx = self.model.encode_prompts("photo kiki")
        ids = [2, 4]
        tokens = p["text.token_embedding"][ids] + p["text.position_embedding"][:2]
        expected = tokens.mean(axis=0) @ p["text.pooler.weight"] + p["text.pooler.bias"]
        assert_allclose(ctx.pooled.numpy(), expected, atol=1e-12)

    def test_placeholder_takes_vector_verbatim(self):
        """A placeholder position holds the supplied vector with no position added"""
        extra = np.array([[0.5, -1.0, 2.0, 0.25]])
        with no_grad():
            ctx = self.model.encode_prompts("a photo of <v0>", extra)
        assert_array_equal(ctx.per_token.numpy()[3], extra[0])

    def test_placeholder_without_vectors(self):
        """Placeholders need inverted embeddings for every slot used"""
        with self.assertRaises(VocabularyError):
            self.model.encode_prompts("a photo of <v0>")
        with self.assertRaises(VocabularyError):
            self.model.encode_prompts("a <v0> <v1>", np.ones((1, 4)))
        with self.assertRaises(ShapeError):
            self.model.encode_prompts("a <v0>", np.ones((1, 3)))

    def test_gradient_reaches_placeholder_vector(self):
        """The encoder is differentiable with respect to the inverted vectors"""
        extra = Tensor(np.ones((1, 4)), requires_grad=True)
        with Graph() as graph:
            loss = sum_(self.model.encode_prompts("a <v0>", extra).pooled)
        grads = backward(graph, loss, [extra])
        self.assertTrue(np.any(grads[extra] != 0.0))


class TestTargetPositions(unittest.TestCase):
    """Locating concept tokens in prompts"""

    def setUp(self):
        self.vocab = miniature_model().vocab
        image = np.zeros((16, 16, 3))
        self.word = ConceptSpec(name="kiki", prompt_tokens=("kiki",), reference_images=[image])
        self.two_words = ConceptSpec(name="pair", prompt_tokens=("kiki", "bobo"), reference_images=[image])
        self.inverted = ConceptSpec(name="inv", inverted_embeddings=np.zeros((2, 4)), reference_images=[image])

    def test_word_positions(self):
        """Positions are 0-based indices of the concept words"""
        ids = tokenize("a photo of kiki", self.vocab, 4)
        self.assertEqual(target_positions(ids, self.word, self.vocab), [3])

    def test_multi_word_concept(self):
        """A multi-word concept matches as a contiguous run"""
        ids = tokenize("a kiki bobo", self.vocab, 4)
        self.assertEqual(target_positions(ids, self.two_words, self.vocab), [1, 2])

    def test_placeholder_positions(self):
        """Inverted concepts target their placeholder slots"""
        ids = tokenize("a <v0> <v1>", self.vocab, 4)
        self.assertEqual(target_positions(ids, self.inverted, self.vocab), [1, 2])

    def test_union_of_concepts(self):
        """Several concepts give the sorted union"""
        ids = tokenize("kiki photo <v0> <v1>", self.vocab, 4)
        self.assertEqual(target_positions(ids, [self.inverted, self.word], self.vocab), [0, 2, 3])

    def test_absent_concept(self):
        """A concept missing from the prompt raises ConceptError"""
        ids = tokenize("a photo of bobo", self.vocab, 4)
        with self.assertRaises(ConceptError):
            target_positions(ids, self.word, self.vocab)


if __name__ == '__main__':
    unittest.main()
