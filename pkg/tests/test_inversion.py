"""
Tests for concept inversion and the Memorization Score
"""

import unittest

import numpy as np
from numpy.testing import assert_array_equal

from src.analytics import memorization_delta, memorization_score
from src.bench import concept_spec, get_concept
from src.denoiser import init_model
from src.diffusion import make_schedule
from src.errors import ConceptError, ConfigError, MetricError
from src.inversion import fill_templates, initial_embeddings, invert, invert_for_score
from src.models import ConceptSpec, DenoiserConfig, InversionConfig
from src.selftest import miniature_model


class TestInvert(unittest.TestCase):
    """Learning placeholder vectors against a frozen model"""

    def setUp(self):
        self.model = miniature_model()
        self.sched = make_schedule(20, 1e-4, 0.02)
        self.images = concept_spec(get_concept("kiki"), count=3).reference_images

    def test_fill_templates(self):
        """The slot receives one placeholder per token"""
        self.assertEqual(fill_templates("a photo of {}", 2), ["a photo of <v0> <v1>"])

    def test_mean_embedding_start(self):
        """The default start is the mean of the regular word rows"""
        start = initial_embeddings(self.model, InversionConfig(n_tokens=2))
        table = self.model.params["text.token_embedding"].data
        expected = table[1:6].mean(axis=0)
        np.testing.assert_allclose(start, np.stack([expected, expected]))

    def test_weights_stay_frozen(self):
        """Inversion never changes the model"""
        before = self.model.fingerprint()
        result = invert(self.model, self.images, "a photo of {}", InversionConfig(steps=5, batch=2), self.sched)
        self.assertEqual(self.model.fingerprint(), before)
        self.assertEqual(result.embeddings.shape, (1, 4))
        self.assertEqual(len(result.losses), 5)

    def test_seeded(self):
        """Equal seeds give identical vectors"""
        cfg = InversionConfig(steps=4, batch=2, seed=3)
        a = invert(self.model, self.images, "a photo of {}", cfg, self.sched).embeddings
        b = invert(self.model, self.images, "a photo of {}", cfg, self.sched).embeddings
        assert_array_equal(a, b)

    def test_zero_steps_returns_start(self):
        """No steps leave the initial vectors"""
        cfg = InversionConfig(steps=0)
        result = invert(self.model, self.images, "a photo of {}", cfg, self.sched)
        assert_array_equal(result.embeddings, initial_embeddings(self.model, cfg))

    def test_slot_count_mismatch(self):
        """A template whose placeholders do not fit n_tokens is refused"""
        with self.assertRaises(ConceptError):
            invert(self.model, self.images, "a <v0> of {}", InversionConfig(steps=1), self.sched)

    def test_needs_images(self):
        """No reference images, no inversion"""
        with self.assertRaises(ConceptError):
            invert(self.model, [], "a photo of {}", InversionConfig(steps=1), self.sched)

    def test_invalid_config(self):
        """Unknown init strategies are refused"""
        with self.assertRaises(ConfigError):
            InversionConfig(init="zeros")

    def test_score_embedding_shape(self):
        """The scoring embedding is one pooled vector"""
        emb = invert_for_score(self.model, self.images, "kiki", InversionConfig(steps=2, batch=2), self.sched)
        self.assertEqual(emb.shape, (4,))


class TestMemorizationScore(unittest.TestCase):
    """Cosine similarity and the before/after report"""

    def test_cosine_values(self):
        """Parallel, orthogonal and opposite vectors"""
        self.assertAlmostEqual(memorization_score([1.0, 2.0], [2.0, 4.0]), 1.0)
        self.assertAlmostEqual(memorization_score([1.0, 0.0], [0.0, 3.0]), 0.0)
        self.assertAlmostEqual(memorization_score([1.0, 1.0], [-1.0, -1.0]), -1.0)

    def test_undefined_cases(self):
        """Zero vectors and mismatched dimensions raise MetricError"""
        with self.assertRaises(MetricError):
            memorization_score([0.0, 0.0], [1.0, 0.0])
        with self.assertRaises(MetricError):
            memorization_score([1.0, 0.0], [1.0, 0.0, 0.0])

    def test_identical_models_have_zero_delta(self):
        """Scoring a model against itself gives equal run lists"""
        model = miniature_model()
        concept = concept_spec(get_concept("kiki"), count=3, templates=["a photo of {}"])
        report = memorization_delta(model, model.copy(), concept, InversionConfig(steps=2, batch=2),
                                    make_schedule(20, 1e-4, 0.02), runs=2, anchor_images=2, threads=2)
        self.assertEqual(report.initial_runs, report.forgetting_runs)
        self.assertEqual(report.delta, 0.0)
        self.assertEqual(report.runs, 2)
        self.assertTrue(all(-1.0 <= s <= 1.0 for s in report.initial_runs))

    def test_reference_prompt_needed_for_inverted_concepts(self):
        """A concept with no words needs an explicit reference prompt"""
        model = miniature_model()
        images = concept_spec(get_concept("kiki"), count=2).reference_images
        concept = ConceptSpec(name="inv", inverted_embeddings=np.ones((1, 4)), reference_images=images)
        with self.assertRaises(ConceptError):
            memorization_delta(model, model, concept, InversionConfig(steps=1), make_schedule(20, 1e-4, 0.02))

    def test_models_must_match(self):
        """Models with different configurations cannot be compared"""
        other = init_model(DenoiserConfig(d_model=8, heads=2, blocks=1, d_ctx=4, time_dim=4, patch=4,
                                          mlp_ratio=2, max_len=4), miniature_model().vocab)
        concept = concept_spec(get_concept("kiki"), count=2, templates=["a photo of {}"])
        with self.assertRaises(MetricError):
            memorization_delta(miniature_model(), other, concept, InversionConfig(steps=1),
                               make_schedule(20, 1e-4, 0.02))


if __name__ == '__main__':
    unittest.main()
