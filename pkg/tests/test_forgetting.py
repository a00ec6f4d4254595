"""
Tests for attention resteering, patches and the two baselines
"""

import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from src.analytics import attention_mass, sample_images
from src.bench import concept_spec, decoy_images, get_concept
from src.denoiser import AttentionRecord, in_scope
from src.diffusion import make_schedule
from src.errors import ConceptError, ConfigError, PatchMismatchError
from src.forgetting import (apply_patch, baseline_blacklist, baseline_naive_finetune, forget, make_patch,
                            resteer_loss)
from src.models import ForgetConfig, NaiveFinetuneConfig, ParamScope, SamplerConfig, TrainLog
from src.selftest import miniature_model
from src.tensor import Tensor


def _uniform_record(n=2, heads=3, m=5, length=4, blocks=2):
    maps = [Tensor(np.full((n, heads, m, length), 1.0 / length)) for _ in range(blocks)]
    return AttentionRecord(maps=maps, t=np.zeros(n, dtype=np.int64))


def _kiki(count=4):
    return concept_spec(get_concept("kiki"), count=count, seed=1, templates=["a photo of {}"])


class TestResteerLoss(unittest.TestCase):
    """The attention-mass objective"""

    def test_uniform_maps_l2(self):
        """Uniform maps give |P| / L^2 under the squared norm"""
        value = resteer_loss(_uniform_record(), [0, 2]).item()
        self.assertAlmostEqual(value, 2 / 16, places=12)

    def test_uniform_maps_l1(self):
        """Uniform maps give |P| / L without the square"""
        value = resteer_loss(_uniform_record(), [0, 2], norm="l1").item()
        self.assertAlmostEqual(value, 2 / 4, places=12)

    def test_head_mean_matches_on_uniform_maps(self):
        """Averaging heads first changes nothing when heads agree"""
        value = resteer_loss(_uniform_record(), [1], reduce="head_mean").item()
        self.assertAlmostEqual(value, 1 / 16, places=12)

    def test_zero_mass(self):
        """Maps that put nothing on the targets give zero loss"""
        probs = np.zeros((1, 1, 2, 3))
        probs[..., 0] = 1.0
        record = AttentionRecord(maps=[Tensor(probs)], t=np.zeros(1, dtype=np.int64))
        self.assertEqual(resteer_loss(record, [1, 2]).item(), 0.0)

    def test_per_item_positions(self):
        """Each batch item can target its own positions"""
        value = resteer_loss(_uniform_record(n=2), [[0], [1, 2]]).item()
        self.assertAlmostEqual(value, 1.5 / 16, places=12)

    def test_empty_positions(self):
        """An empty position list is an error"""
        with self.assertRaises(ConceptError):
            resteer_loss(_uniform_record(), [])
        with self.assertRaises(ConceptError):
            resteer_loss(_uniform_record(n=2), [[0], []])


class TestForget(unittest.TestCase):
    """Resteering runs on the miniature model"""

    @classmethod
    def setUpClass(cls):
        cls.sched = make_schedule(20, 1e-4, 0.02)
        cls.model = miniature_model()
        cls.concept = _kiki()
        cls.cfg = ForgetConfig(concepts=[cls.concept], steps=15, lr=2.0, batch=2, seed=0)
        cls.base_fingerprint = cls.model.fingerprint()
        cls.forgotten, cls.patch, cls.log = forget(cls.model, cls.cfg, cls.sched)

    def test_base_model_untouched(self):
        """The input model keeps its weights"""
        self.assertEqual(self.model.fingerprint(), self.base_fingerprint)

    def test_only_scope_changes(self):
        """Parameters outside the cross-attention scope are bit-identical"""
        for name, p in self.forgotten.params.items():
            if not in_scope(name, ParamScope.CA_ONLY):
                assert_array_equal(p.data, self.model.params[name].data, err_msg=name)
        self.assertTrue(all(in_scope(n, ParamScope.CA_ONLY) for n in self.patch.names))
        self.assertFalse(self.patch.is_empty())

    def test_log_has_one_entry_per_step(self):
        """Every step records its loss and target mass"""
        self.assertEqual(len(self.log), 15)
        self.assertEqual(len(self.log.target_mass), 15)
        self.assertTrue(all(0.0 <= v <= 1.0 for v in self.log.losses))

    def test_target_mass_drops(self):
        """Attention on the concept token falls on fixed noised references"""
        before = attention_mass(self.model, self.concept, self.sched, (4, 10, 16))
        after = attention_mass(self.forgotten, self.concept, self.sched, (4, 10, 16))
        self.assertLess(after, before)

    def test_reproducible(self):
        """The same seed gives a bit-identical model"""
        again, _, _ = forget(self.model, self.cfg, self.sched)
        self.assertEqual(again.fingerprint(), self.forgotten.fingerprint())

    def test_patch_reproduces_model(self):
        """Applying the patch to the base rebuilds the forgetting model exactly"""
        patched = apply_patch(self.model, self.patch)
        self.assertEqual(patched.fingerprint(), self.forgotten.fingerprint())

    def test_patch_twice(self):
        """Re-applying a patch is reported as already applied"""
        with self.assertRaisesRegex(PatchMismatchError, "already applied"):
            apply_patch(self.forgotten, self.patch)

    def test_patch_on_other_base(self):
        """A patch refuses a model with different scoped weights"""
        with self.assertRaisesRegex(PatchMismatchError, "fingerprint mismatch"):
            apply_patch(miniature_model(seed=5), self.patch)

    def test_full_scope_excludes_text(self):
        """FULL-scope patches never hold text-encoder tables"""
        cfg = ForgetConfig(concepts=[self.concept], scope=ParamScope.FULL, steps=2, lr=0.5, batch=2)
        model, patch, _ = forget(self.model, cfg, self.sched)
        self.assertFalse(any(n.startswith("text.") for n in patch.names))
        assert_array_equal(model.params["text.token_embedding"].data,
                           self.model.params["text.token_embedding"].data)

    def test_zero_steps(self):
        """No steps give an empty patch"""
        cfg = ForgetConfig(concepts=[self.concept], steps=0, batch=2)
        model, patch, log = forget(self.model, cfg, self.sched)
        self.assertTrue(patch.is_empty())
        self.assertEqual(len(log), 0)
        self.assertEqual(model.fingerprint(), self.base_fingerprint)

    def test_on_step_callback(self):
        """The callback sees every step number"""
        seen = []
        cfg = ForgetConfig(concepts=[self.concept], steps=3, batch=2)
        forget(self.model, cfg, self.sched, on_step=lambda step, _: seen.append(step))
        self.assertEqual(seen, [1, 2, 3])

    def test_missing_token_source(self):
        """Asking for placeholders on a word-only concept fails"""
        cfg = ForgetConfig(concepts=[self.concept], steps=1, batch=2, token_source="inverted")
        with self.assertRaises(ConceptError):
            forget(self.model, cfg, self.sched)

    def test_invalid_config(self):
        """Bad settings are refused at construction"""
        with self.assertRaises(ConfigError):
            ForgetConfig(concepts=[])
        with self.assertRaises(ConfigError):
            ForgetConfig(concepts=[self.concept], norm="l3")
        with self.assertRaises(ConfigError):
            ForgetConfig(concepts=[self.concept], weights=[1.0, 2.0])


class TestPatches(unittest.TestCase):
    """Patch construction"""

    def test_deltas_are_exact(self):
        """before + delta reproduces after bit for bit"""
        rng = np.random.default_rng(0)
        before = {"blocks.0.xattn.q.weight": rng.standard_normal((3, 3)),
                  "blocks.0.attn.q.weight": rng.standard_normal((3, 3))}
        after = {n: v + 1e-7 * rng.standard_normal(v.shape) for n, v in before.items()}
        patch = make_patch(before, after, ParamScope.CA_ONLY)
        self.assertEqual(patch.names, ["blocks.0.xattn.q.weight"])
        name = patch.names[0]
        assert_array_equal(before[name] + patch.deltas[name], after[name])
        self.assertEqual(patch.metadata["scope"], "ca")

    def test_shape_change_refused(self):
        """A parameter that changed shape cannot be patched"""
        with self.assertRaises(PatchMismatchError):
            make_patch({"head.bias": np.zeros(2)}, {"head.bias": np.zeros(3)}, ParamScope.FULL)


class TestBaselines(unittest.TestCase):
    """Blacklisting and naive finetuning"""

    def setUp(self):
        self.model = miniature_model()
        self.concept = _kiki()

    def test_blacklist_zeroes_rows(self):
        """Only the concept word's embedding row is zeroed"""
        out = baseline_blacklist(self.model, self.concept)
        row = self.model.vocab.index("kiki")
        table = out.params["text.token_embedding"].data
        assert_array_equal(table[row], np.zeros(4))
        others = [i for i in range(len(self.model.vocab)) if i != row]
        assert_array_equal(table[others], self.model.params["text.token_embedding"].data[others])

    def test_blacklist_leaves_other_prompts_unchanged(self):
        """Prompts without the concept word sample bit-identical images"""
        out = baseline_blacklist(self.model, self.concept)
        sched = make_schedule(20, 1e-4, 0.02)
        cfg = SamplerConfig(steps=5, seed=3)
        before = sample_images(self.model, "a photo of bobo", 2, sched, cfg)
        after = sample_images(out, "a photo of bobo", 2, sched, cfg)
        assert_array_equal(after, before)

    def test_blacklist_needs_words(self):
        """Concepts without words cannot be blacklisted"""
        inverted = type(self.concept)(name="inv", inverted_embeddings=np.ones((1, 4)),
                                      reference_images=self.concept.reference_images)
        with self.assertRaises(ConceptError):
            baseline_blacklist(self.model, inverted)

    def test_naive_finetune_changes_full_scope(self):
        """Naive finetuning updates denoiser weights and logs every step"""
        log = TrainLog()
        cfg = NaiveFinetuneConfig(steps=2, lr=0.01, batch=2)
        out = baseline_naive_finetune(self.model, self.concept, decoy_images(4, 0), cfg,
                                      make_schedule(20, 1e-4, 0.02), log=log)
        self.assertEqual(len(log), 2)
        self.assertNotEqual(out.fingerprint(), self.model.fingerprint())
        assert_allclose(out.params["text.token_embedding"].data, self.model.params["text.token_embedding"].data)

    def test_naive_finetune_rejects_bad_decoys(self):
        """Empty decoys or decoys equal to a reference are refused"""
        sched = make_schedule(20, 1e-4, 0.02)
        cfg = NaiveFinetuneConfig(steps=1, batch=2)
        with self.assertRaises(ConceptError):
            baseline_naive_finetune(self.model, self.concept, [], cfg, sched)
        with self.assertRaises(ConceptError):
            baseline_naive_finetune(self.model, self.concept, [self.concept.reference_images[0]], cfg, sched)


if __name__ == '__main__':
    unittest.main()
