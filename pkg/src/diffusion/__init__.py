"""
Noise schedules, forward corruption, the simplified training loss and
ancestral sampling

The forward process blends a clean image with Gaussian noise through the
closed-form marginal ``x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps``.
Models are trained to predict ``eps`` (mean squared error), and sampling runs
the epsilon-parameterized reverse chain with the fixed variance ``beta_t``.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from ..errors import ScheduleError, ShapeError
from ..models import SamplerConfig, ScheduleConfig
from ..tensor import Tensor, mean, mul, no_grad, randn, rng_stream, sub, add

logger = logging.getLogger(__name__)


class EpsilonModel(Protocol):
    """Anything that predicts noise from (x_t, t, context)"""

    def forward(self, x_t: Tensor, t: np.ndarray, ctx, record: bool = False):
        ...


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step betas and their running products (read-only, shareable)"""
    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule with alpha_bar computed by running product"""
    if T < 2:
        raise ScheduleError(f"schedule needs T >= 2, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    beta.flags.writeable = False
    alpha_bar.flags.writeable = False
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar)


def schedule_from_config(cfg: ScheduleConfig) -> NoiseSchedule:
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def _check_steps(t, sched: NoiseSchedule) -> np.ndarray:
    steps = np.asarray(t, dtype=np.int64)
    if steps.size == 0 or steps.min() < 0 or steps.max() >= sched.T:
        raise ScheduleError(f"timestep out of range [0, {sched.T})")
    return steps


def _per_item(values: np.ndarray, steps: np.ndarray, ndim: int) -> np.ndarray:
    coeff = values[steps]
    if coeff.ndim == 0:
        return coeff
    return coeff.reshape((-1,) + (1,) * (ndim - 1))


def q_sample(x0: Tensor, t: Union[int, Sequence[int], np.ndarray], eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Corrupt ``x0`` to step ``t``; ``t`` is a scalar or one step per batch item"""
    if eps.shape != x0.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match image shape {x0.shape}")
    steps = _check_steps(t, sched)
    signal = np.sqrt(_per_item(sched.alpha_bar, steps, x0.ndim))
    noise = np.sqrt(1.0 - _per_item(sched.alpha_bar, steps, x0.ndim))
    return add(mul(x0, signal), mul(eps, noise))


def ddpm_loss(model: EpsilonModel, x0: Tensor, ctx, sched: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    """Simplified epsilon-prediction loss at uniformly drawn timesteps"""
    batch = x0.shape[0]
    t = rng.integers(0, sched.T, size=batch)
    eps = randn(x0.shape, rng)
    x_t = q_sample(x0, t, eps, sched)
    eps_hat, _ = model.forward(x_t, t, ctx)
    if eps_hat.shape != eps.shape:
        raise ShapeError(f"model output {eps_hat.shape} does not match noise {eps.shape}")
    diff = sub(eps_hat, eps)
    return mean(mul(diff, diff))


@dataclass(frozen=True)
class SamplingPlan:
    """Timesteps visited by the sampler with their effective betas"""
    timesteps: Tuple[int, ...]
    beta: np.ndarray
    alpha_bar: np.ndarray


def sampling_plan(sched: NoiseSchedule, steps: int) -> SamplingPlan:
    """Respace the chain to ``steps`` evenly strided timesteps.

    With ``steps == T`` the plan is the schedule itself. Otherwise betas are
    re-derived from the alpha_bar values of the visited steps.
    """
    if steps < 1 or steps > sched.T or sched.T % steps:
        raise ScheduleError(f"sampler steps {steps} must divide T={sched.T}")
    stride = sched.T // steps
    timesteps = tuple(range(sched.T - 1, -1, -stride))
    alpha_bar = sched.alpha_bar[list(timesteps)]
    if stride == 1:
        beta = sched.beta[list(timesteps)]
    else:
        prev = np.append(alpha_bar[1:], 1.0)
        beta = 1.0 - alpha_bar / prev
    return SamplingPlan(timesteps=timesteps, beta=beta, alpha_bar=alpha_bar)


def p_sample(model: EpsilonModel, ctx, sched: NoiseSchedule, cfg: SamplerConfig,
             image_shape: Optional[Tuple[int, ...]] = None, record: bool = False):
    """Ancestral sampling from pure noise.

    Returns ``(images, records)``: images clamped to [-1, 1] as a Tensor of
    shape (N, H, W, C), and a list of per-step attention records when
    ``record`` is set (else None). The result depends only on the weights,
    the context and ``cfg.seed``.
    """
    plan = sampling_plan(sched, cfg.steps)
    if image_shape is None:
        image_shape = model.cfg.image_shape
    batch = _context_batch(ctx)
    rng = rng_stream(cfg.seed, "sample")
    records: Optional[List] = [] if record else None

    with no_grad():
        x = rng.standard_normal((batch,) + tuple(image_shape))
        last = len(plan.timesteps) - 1
        for k, t in enumerate(plan.timesteps):
            eps_hat, rec = model.forward(Tensor(x), np.full(batch, t), ctx, record=record)
            beta = plan.beta[k]
            mean_ = (x - beta / np.sqrt(1.0 - plan.alpha_bar[k]) * eps_hat.data) / np.sqrt(1.0 - beta)
            if k < last:
                x = mean_ + np.sqrt(beta) * rng.standard_normal(x.shape)
            else:
                x = mean_
            if records is not None:
                records.append(rec)
    logger.debug("sampled %d images in %d steps", batch, len(plan.timesteps))
    return Tensor(np.clip(x, -1.0, 1.0)), records


def _context_batch(ctx) -> int:
    per_token = getattr(ctx, "per_token", None)
    if per_token is None or per_token.ndim < 3:
        return 1
    return per_token.shape[0]
