"""
Tests for noise schedules, forward corruption, the training loss and sampling
"""

import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from src.diffusion import ddpm_loss, make_schedule, p_sample, q_sample, sampling_plan
from src.errors import ScheduleError, ShapeError
from src.models import SamplerConfig
from src.selftest import miniature_model
from src.tensor import Tensor, randn, rng_stream


class ZeroModel:
    """Predicts zero noise for any input"""

    def forward(self, x_t, t, ctx, record=False):
        return Tensor(np.zeros(x_t.shape)), None


class TestSchedule(unittest.TestCase):
    """Linear beta schedule"""

    def test_alpha_bar_is_running_product(self):
        """alpha_bar is the cumulative product of 1 - beta and decreases"""
        sched = make_schedule(200, 1e-4, 0.02)
        assert_allclose(sched.alpha_bar, np.cumprod(1.0 - sched.beta))
        self.assertTrue(np.all(np.diff(sched.alpha_bar) < 0))
        self.assertEqual(sched.T, 200)

    def test_two_step_hand_product(self):
        """T=2 with constant beta 0.1 gives alpha_bar [0.9, 0.81]"""
        sched = make_schedule(2, 0.1, 0.1)
        assert_allclose(sched.beta, [0.1, 0.1])
        assert_allclose(sched.alpha_bar, [0.9, 0.81], rtol=0, atol=1e-15)

    def test_invalid_ranges(self):
        """Bad T or beta ranges raise ScheduleError"""
        for args in ((1, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)):
            with self.subTest(args=args):
                with self.assertRaises(ScheduleError):
                    make_schedule(*args)


class TestForwardProcess(unittest.TestCase):
    """q_sample and its marginals"""

    def setUp(self):
        self.sched = make_schedule(200, 1e-4, 0.02)
        self.rng = rng_stream(0, "test")

    def test_marginal_matches_closed_form(self):
        """Mean and variance over 10^4 draws lie within 3 sigma of the closed form"""
        n, t = 10_000, 120
        x0 = Tensor(np.full((n, 1), 0.5))
        xt = q_sample(x0, t, randn((n, 1), self.rng), self.sched).numpy().reshape(-1)
        ab = self.sched.alpha_bar[t]
        var = 1.0 - ab
        self.assertLess(abs(xt.mean() - np.sqrt(ab) * 0.5), 3 * np.sqrt(var / n))
        self.assertLess(abs(xt.var() - var), 3 * var * np.sqrt(2.0 / n))

    def test_first_step_keeps_signal(self):
        """At t = 0 the corruption is tiny"""
        x0 = Tensor(np.full((2, 3), 0.7))
        xt = q_sample(x0, 0, randn((2, 3), self.rng), self.sched)
        assert_allclose(xt.numpy(), x0.numpy(), atol=0.05)

    def test_per_item_timesteps(self):
        """Each batch item may use its own timestep"""
        x0 = Tensor(np.ones((2, 1)))
        eps = Tensor(np.zeros((2, 1)))
        xt = q_sample(x0, [0, 199], eps, self.sched).numpy().reshape(-1)
        assert_allclose(xt, np.sqrt(self.sched.alpha_bar[[0, 199]]))

    def test_out_of_range_timestep(self):
        """Timesteps outside [0, T) raise ScheduleError"""
        with self.assertRaises(ScheduleError):
            q_sample(Tensor(np.ones((1, 1))), 200, Tensor(np.ones((1, 1))), self.sched)

    def test_noise_shape_must_match(self):
        """Noise and image shapes must agree"""
        with self.assertRaises(ShapeError):
            q_sample(Tensor(np.ones((2, 1))), 3, Tensor(np.ones((1, 1))), self.sched)

    def test_zero_predictor_loss_is_one(self):
        """A model predicting zero noise scores the noise variance, about 1"""
        loss = ddpm_loss(ZeroModel(), Tensor(np.zeros((4096, 4))), None, self.sched, self.rng).item()
        self.assertAlmostEqual(loss, 1.0, delta=0.05)


class TestSampling(unittest.TestCase):
    """Respaced ancestral sampling"""

    def setUp(self):
        self.sched = make_schedule(20, 1e-4, 0.02)
        self.model = miniature_model()
        self.ctx = self.model.encode_prompts(["a photo of kiki", "a photo of bobo"])

    def test_full_plan_is_the_schedule(self):
        """steps == T visits every step with the original betas"""
        plan = sampling_plan(self.sched, 20)
        self.assertEqual(plan.timesteps, tuple(range(19, -1, -1)))
        assert_array_equal(plan.beta, self.sched.beta[::-1])

    def test_respaced_plan_telescopes(self):
        """Respaced betas multiply back to the final alpha_bar"""
        plan = sampling_plan(self.sched, 4)
        self.assertEqual(plan.timesteps, (19, 14, 9, 4))
        assert_allclose(np.prod(1.0 - plan.beta), self.sched.alpha_bar[19])

    def test_steps_must_divide_T(self):
        """A stride that does not divide T is refused"""
        with self.assertRaises(ScheduleError):
            sampling_plan(self.sched, 3)

    def test_sampling_is_seeded(self):
        """Same seed, same images; different seed, different images"""
        a, _ = p_sample(self.model, self.ctx, self.sched, SamplerConfig(steps=5, seed=1))
        b, _ = p_sample(self.model, self.ctx, self.sched, SamplerConfig(steps=5, seed=1))
        c, _ = p_sample(self.model, self.ctx, self.sched, SamplerConfig(steps=5, seed=2))
        assert_array_equal(a.numpy(), b.numpy())
        self.assertFalse(np.array_equal(a.numpy(), c.numpy()))
        self.assertEqual(a.shape, (2, 16, 16, 3))
        self.assertLessEqual(np.abs(a.numpy()).max(), 1.0)

    def test_zero_predictor_single_step_rescales_draw(self):
        """With eps = 0 and one step the image is the initial draw divided by sqrt(alpha_bar)"""
        sched = make_schedule(2, 0.1, 0.1)
        images, _ = p_sample(ZeroModel(), None, sched, SamplerConfig(steps=1, seed=6), image_shape=(64,))
        start = rng_stream(6, "sample").standard_normal((1, 64))
        assert_allclose(images.numpy(), np.clip(start / 0.9, -1.0, 1.0), rtol=1e-12, atol=0)

    def test_zero_predictor_trajectory(self):
        """With eps = 0 every step rescales by 1/sqrt(1 - beta) and adds the seeded noise"""
        images, _ = p_sample(ZeroModel(), None, self.sched, SamplerConfig(steps=4, seed=6), image_shape=(64,))
        plan = sampling_plan(self.sched, 4)
        rng = rng_stream(6, "sample")
        x = rng.standard_normal((1, 64))
        for k, beta in enumerate(plan.beta):
            x = x / np.sqrt(1.0 - beta)
            if k < len(plan.beta) - 1:
                x = x + np.sqrt(beta) * rng.standard_normal(x.shape)
        assert_allclose(images.numpy(), np.clip(x, -1.0, 1.0), rtol=1e-12, atol=0)

    def test_sampling_records_attention(self):
        """record=True yields one attention record per visited step"""
        _, records = p_sample(self.model, self.ctx, self.sched, SamplerConfig(steps=4, seed=0), record=True)
        self.assertEqual(len(records), 4)
        self.assertEqual(records[0].maps[0].shape, (2, 2, 16, 4))


if __name__ == '__main__':
    unittest.main()
