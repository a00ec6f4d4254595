"""
Built-in self checks

This module runs the checks behind ``resteer selftest``: finite-difference
gradient checks of every differentiable primitive and of the full
forward-plus-resteering-loss composite on a miniature model, and a handful
of invariants (softmax normalization, the zero value-projection gradient,
loss bounds, forward-process marginals, exact patch round trips, the probe
on its own templates). Everything runs on seeded data in a few seconds.
"""

import logging
import tempfile
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from ..bench import ProbeClassifier, catalog, render
from ..denoiser import Denoiser, init_model, position_mask
from ..diffusion import ddpm_loss, make_schedule, q_sample
from ..forgetting import apply_patch, make_patch, resteer_loss
from ..models import DenoiserConfig, ParamScope
from ..storage import ArtifactStore, load_patch
from ..tensor import (Graph, Tensor, add, backward, concatenate, gather, gelu, gradcheck, layer_norm, linear,
                      matmul, mean, mul, no_grad, randn, reshape, rng_stream, scale, softmax, sub, sum_, take,
                      transpose)
from ..text import Vocabulary, tokenize_batch

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4
SOFTMAX_TOLERANCE = 1e-9


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float = 0.0
    detail: str = ""


def miniature_model(seed: int = 0) -> Denoiser:
    """Small denoiser used by the composite checks"""
    cfg = DenoiserConfig(d_model=8, heads=2, blocks=2, d_ctx=4, time_dim=4, patch=4, mlp_ratio=2, max_len=4)
    vocab = Vocabulary.build(["a", "photo", "of", "kiki", "bobo"], placeholders=2)
    model = init_model(cfg, vocab, seed)
    model.freeze()
    return model


def _weighted(fn: Callable[[Tensor], Tensor], weights: np.ndarray) -> Callable[[Tensor], Tensor]:
    return lambda x: sum_(mul(fn(x), weights))


def primitive_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    """(name, scalar function of x, point) for every differentiable primitive"""
    a = rng.standard_normal((3, 4))
    other = Tensor(rng.standard_normal((3, 4)))
    right = Tensor(rng.standard_normal((4, 2)))
    w34 = rng.standard_normal((3, 4))
    gamma, beta = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
    table = rng.standard_normal((5, 3))
    return [
        ("add", _weighted(lambda x: add(x, other), w34), a),
        ("sub", _weighted(lambda x: sub(other, x), w34), a),
        ("mul", _weighted(lambda x: mul(x, x), w34), a),
        ("scale", _weighted(lambda x: scale(x, -1.7), w34), a),
        ("matmul", _weighted(lambda x: matmul(x, right), rng.standard_normal((3, 2))), a),
        ("transpose", _weighted(lambda x: transpose(x), rng.standard_normal((4, 3))), a),
        ("reshape", _weighted(lambda x: reshape(x, (2, 6)), rng.standard_normal((2, 6))), a),
        ("concatenate", _weighted(lambda x: concatenate([x, other], axis=1), rng.standard_normal((3, 8))), a),
        ("take", _weighted(lambda x: take(x, [0, 2, 2], axis=1), rng.standard_normal((3, 3))), a),
        ("gather", _weighted(lambda x: gather(x, np.array([[0, 4], [4, 1]])), rng.standard_normal((2, 2, 3))), table),
        ("sum", _weighted(lambda x: sum_(x, axis=0), rng.standard_normal(4)), a),
        ("mean", _weighted(lambda x: mean(x, axis=1, keepdims=True), rng.standard_normal((3, 1))), a),
        ("softmax", _weighted(lambda x: softmax(x, axis=-1), w34), a),
        ("gelu", _weighted(gelu, w34), a),
        ("layer_norm", _weighted(lambda x: layer_norm(x, gamma, beta), w34), a),
        ("linear", _weighted(lambda x: linear(x, right, Tensor(np.ones(2))), rng.standard_normal((3, 2))), a),
    ]


def check_primitives(seed: int = 0) -> List[CheckResult]:
    results = []
    for name, fn, point in primitive_cases(rng_stream(seed, "selftest")):
        err = gradcheck(fn, point)
        results.append(CheckResult(f"gradcheck {name}", err <= GRADCHECK_TOLERANCE, err))
    return results


def _noised_batch(model: Denoiser, rng: np.random.Generator, batch: int = 2):
    sched = make_schedule(20, 1e-4, 0.02)
    x0 = Tensor(rng.uniform(-1, 1, (batch,) + model.cfg.image_shape))
    t = np.array([3, 15][:batch])
    x_t = q_sample(x0, t, randn(x0.shape, rng), sched)
    ids = tokenize_batch(["a photo of kiki"] * batch, model.vocab, model.cfg.max_len)
    return sched, x0, x_t, t, ids


def check_composites(seed: int = 0) -> List[CheckResult]:
    """Gradient checks through the whole model"""
    model = miniature_model(seed)
    rng = rng_stream(seed, "selftest")
    sched, x0, x_t, t, ids = _noised_batch(model, rng)
    with no_grad():
        ctx = model.encode_ids(ids)
    positions = [3]
    results = []

    for name in ("blocks.0.xattn.k.weight", "blocks.1.xattn.q.weight", "blocks.0.attn.v.weight"):
        work = model.copy()

        def composite(x, work=work, name=name):
            work.params[name] = x
            _, record = work.forward(x_t, t, ctx, record=True)
            return resteer_loss(record, positions)

        err = gradcheck(composite, model.params[name].data)
        results.append(CheckResult(f"gradcheck resteer loss wrt {name}", err <= GRADCHECK_TOLERANCE, err))

    placeholder_ids = tokenize_batch(["a photo of <v0>"] * 2, model.vocab, model.cfg.max_len)

    def inversion(x):
        return ddpm_loss(model, x0, model.encode_ids(placeholder_ids, x), sched, rng_stream(seed, "selftest.ddpm"))

    err = gradcheck(inversion, rng.standard_normal((1, model.cfg.d_ctx)))
    results.append(CheckResult("gradcheck diffusion loss wrt placeholder vector", err <= GRADCHECK_TOLERANCE, err))
    return results


def check_invariants(seed: int = 0) -> List[CheckResult]:
    rng = rng_stream(seed, "selftest")
    results = []

    with no_grad():
        rows = softmax(Tensor(50.0 * rng.standard_normal((64, 9))), axis=-1).numpy().sum(axis=-1)
    err = float(np.max(np.abs(rows - 1.0)))
    results.append(CheckResult("softmax rows sum to one", err <= SOFTMAX_TOLERANCE, err))

    model = miniature_model(seed)
    sched, _, x_t, t, ids = _noised_batch(model, rng)
    last = model.cfg.blocks - 1
    v_names = [f"blocks.{i}.xattn.v.weight" for i in range(model.cfg.blocks)]
    model.set_trainable(v_names)
    with Graph() as graph:
        _, record = model.forward(x_t, t, model.encode_ids(ids), record=True)
        probs = record.maps[last]
        loss = sum_(mul(probs, position_mask([3], 2, model.cfg.max_len)[:, None, None, :]))
    grads = backward(graph, loss, [model.params[n] for n in v_names])
    leak = float(np.max(np.abs(grads[model.params[v_names[last]]])))
    results.append(CheckResult("attention-map loss gives V projection zero gradient", leak == 0.0, leak))
    model.freeze()

    with no_grad():
        _, record = model.forward(x_t, t, model.encode_ids(ids), record=True)
        value = resteer_loss(record, [1, 3]).item()
    results.append(CheckResult("resteer loss within [0, |positions|]", 0.0 <= value <= 2.0, value))

    draws = 10_000
    x0 = np.full((draws, 1), 0.5)
    t_check = 12
    xt = q_sample(Tensor(x0), t_check, randn(x0.shape, rng), sched).numpy()
    ab = sched.alpha_bar[t_check]
    mean_err = abs(xt.mean() - np.sqrt(ab) * 0.5) / np.sqrt((1 - ab) / draws)
    results.append(CheckResult("forward marginal mean within 3 sigma", mean_err <= 3.0, float(mean_err)))

    after = {n: v.copy() for n, v in model.state_dict().items()}
    for name in after:
        if ".xattn." in name:
            after[name] = after[name] + 1e-3 * rng.standard_normal(after[name].shape)
    patch = make_patch(model.state_dict(), after, ParamScope.CA_ONLY)
    with tempfile.TemporaryDirectory() as tmp:
        store = ArtifactStore(tmp)
        reloaded = load_patch(store.save_patch("check.rpch", patch))
    patched = apply_patch(model, reloaded)
    exact = all(np.array_equal(patched.params[n].data, after[n]) for n in patch.names)
    results.append(CheckResult("patch round trip is bit exact", exact))

    probe = ProbeClassifier()
    wrong = [c.name for c in catalog() if probe.classify(render(c, 0, jitter=False))[0] != c.name]
    results.append(CheckResult("probe recognizes its own templates", not wrong, float(len(wrong)), ", ".join(wrong)))
    return results


def run_selftest(seed: int = 0) -> List[CheckResult]:
    """Every check; the caller decides how to report failures"""
    results = check_primitives(seed) + check_composites(seed) + check_invariants(seed)
    for r in results:
        if r.passed:
            logger.info("pass %s (%.3g)", r.name, r.value)
        else:
            logger.warning("FAIL %s (%.3g) %s", r.name, r.value, r.detail)
    return results
