"""
Attention resteering, the two forgetting baselines and model patches

``forget`` finetunes a scoped set of denoiser weights so that patch tokens
stop attending to the context positions of the concepts being forgotten.
Only the attention-mass loss is optimized; the diffusion loss is not part of
the objective. Every run ends with a ``ModelPatch`` holding the weight deltas
against the pre-run model.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from ..denoiser import Denoiser, fingerprint_arrays, in_scope, position_mask, select_params
from ..diffusion import NoiseSchedule, ddpm_loss, q_sample
from ..errors import ConceptError, DivergenceError, NonFiniteError, PatchMismatchError
from ..models import ConceptSpec, ForgetConfig, ModelPatch, NaiveFinetuneConfig, ParamScope, TrainLog
from ..tensor import SGD, Graph, Tensor, add, backward, mean, mul, randn, rng_stream, scale, sum_
from ..text import target_positions, tokenize_batch

logger = logging.getLogger(__name__)

StepCallback = Callable[[int, Denoiser], None]


def resteer_loss(record, positions, norm: str = "l2", reduce: str = "per_head") -> Tensor:
    """Attention mass the patch queries put on the target context positions.

    For each block: ``(1/m) * sum_i sum_{j in positions} A[i, j]^2`` averaged
    over heads and batch items, then averaged over blocks. ``positions`` is a
    list shared by the batch or one list per batch item. ``norm="l1"`` drops
    the square; ``reduce="head_mean"`` averages the heads before the norm.
    """
    if len(positions) == 0 or any(not np.isscalar(p) and len(p) == 0 for p in positions):
        raise ConceptError("resteering needs at least one target position")
    first = record.maps[0]
    n, heads, m, length = first.shape
    mask = position_mask(positions, n, length)

    per_block: List[Tensor] = []
    for attn in record.maps:
        if reduce == "head_mean":
            attn = mean(attn, axis=1)
            weights = mask[:, None, :]
            count = n * m
        else:
            weights = mask[:, None, None, :]
            count = n * heads * m
        values = mul(attn, attn) if norm == "l2" else attn
        per_block.append(scale(sum_(mul(values, weights)), 1.0 / count))

    total = per_block[0]
    for term in per_block[1:]:
        total = add(total, term)
    return scale(total, 1.0 / len(per_block))


@dataclass
class _PreparedConcept:
    """Tokenized templates, their target positions and placeholder vectors"""
    spec: ConceptSpec
    images: np.ndarray
    ids: np.ndarray
    positions: List[List[int]]
    extra: Optional[Tensor]


def _uses_placeholders(concept: ConceptSpec, token_source: str) -> bool:
    if token_source == "prompt":
        if concept.prompt_tokens is None:
            raise ConceptError(f"concept {concept.name!r} has no prompt tokens")
        return False
    if token_source == "inverted":
        if not concept.uses_inversion:
            raise ConceptError(f"concept {concept.name!r} has no inverted embeddings")
        return True
    return concept.uses_inversion and not concept.prompt_tokens


def prepare_concept(model: Denoiser, concept: ConceptSpec, token_source: str = "auto") -> _PreparedConcept:
    """Resolve a concept to token ids and target positions for every template"""
    inverted = _uses_placeholders(concept, token_source)
    ids = tokenize_batch(concept.prompts(inverted), model.vocab, model.cfg.max_len)
    positions = [target_positions(row, concept, model.vocab, inverted=inverted) for row in ids]
    extra = Tensor(concept.inverted_embeddings) if inverted else None
    images = np.stack([np.asarray(img, dtype=np.float64) for img in concept.reference_images])
    if images.shape[1:] != model.cfg.image_shape:
        raise ConceptError(f"reference images of {concept.name!r} have shape {images.shape[1:]}, "
                           f"model expects {model.cfg.image_shape}")
    return _PreparedConcept(concept, images, ids, positions, extra)


def _check_scope(model: Denoiser, scope_names: Sequence[str]) -> None:
    allowed = set(scope_names)
    leaked = [name for name, p in model.params.items() if p.grad is not None and name not in allowed]
    if leaked:
        raise AssertionError(f"gradients reached parameters outside the scope: {leaked[:5]}")


def forget(model: Denoiser, cfg: ForgetConfig, sched: NoiseSchedule,
           rng: Optional[np.random.Generator] = None, progress: bool = False,
           on_step: Optional[StepCallback] = None) -> Tuple[Denoiser, ModelPatch, TrainLog]:
    """Run attention resteering and return ``(model', patch, log)``.

    Each step draws, for every concept, a batch of reference images,
    templates, timesteps and noise, records the cross-attention maps of the
    noised batch and adds the weighted resteering loss. Plain SGD then
    updates the scoped parameters only. ``model`` itself is left untouched.
    """
    rng = rng_stream(cfg.seed, "forget") if rng is None else rng
    work = model.copy()
    scope_names = list(select_params(work, cfg.scope))
    before = {name: work.params[name].data for name in scope_names}
    prepared = [prepare_concept(work, c, cfg.token_source) for c in cfg.concepts]
    work.set_trainable(scope_names)
    optimizer = SGD(cfg.lr)
    log = TrainLog()
    image_shape = work.cfg.image_shape

    logger.info("forgetting %s over %d %s-scope parameters for %d steps",
                ", ".join(c.name for c in cfg.concepts), work.num_parameters(scope_names),
                cfg.scope.value, cfg.steps)
    for step in tqdm(range(cfg.steps), desc="forget", disable=not progress):
        started = time.perf_counter()
        try:
            with Graph() as graph:
                total: Optional[Tensor] = None
                masses: List[float] = []
                for prep, weight in zip(prepared, cfg.weights):
                    pick = rng.integers(0, len(prep.images), size=cfg.batch)
                    tpl = rng.integers(0, len(prep.ids), size=cfg.batch)
                    t = rng.integers(0, sched.T, size=cfg.batch)
                    eps = randn((cfg.batch,) + image_shape, rng)
                    x_t = q_sample(Tensor(prep.images[pick]), t, eps, sched)
                    ctx = work.encode_ids(prep.ids[tpl], prep.extra)
                    _, record = work.forward(x_t, t, ctx, record=True)
                    positions = [prep.positions[k] for k in tpl]
                    loss = scale(resteer_loss(record, positions, cfg.norm, cfg.reduce), weight)
                    total = loss if total is None else add(total, loss)
                    masses.append(record.mass(position_mask(positions, cfg.batch, work.cfg.max_len)))
            value = total.item()
            if not np.isfinite(value):
                raise DivergenceError(f"resteering loss became {value} at step {step}")
            for name in scope_names:
                work.params[name].zero_grad()
            backward(graph, total, [work.params[n] for n in scope_names])
            _check_scope(work, scope_names)
            optimizer.step(work.params, scope_names)
        except NonFiniteError as exc:
            raise DivergenceError(f"forgetting diverged at step {step}: {exc}") from exc
        log.append(value, time.perf_counter() - started, float(np.mean(masses)))
        logger.debug("step %d loss %.6f mass %.6f", step, value, log.target_mass[-1])
        if on_step is not None:
            on_step(step + 1, work)

    work.freeze()
    metadata = {
        "concepts": [c.name for c in cfg.concepts],
        "method": "fmn",
        "steps": cfg.steps,
        "lr": cfg.lr,
        "norm": cfg.norm,
        "reduce": cfg.reduce,
    }
    patch = make_patch(before, work.state_dict(), cfg.scope, metadata)
    if log.losses:
        logger.info("resteering loss %.5f -> %.5f", log.losses[0], log.losses[-1])
    return work, patch, log


def _exact_delta(before: np.ndarray, after: np.ndarray, name: str) -> np.ndarray:
    delta = after - before
    for _ in range(64):
        bad = (before + delta) != after
        if not bad.any():
            return delta
        toward = np.where((before + delta)[bad] < after[bad], np.inf, -np.inf)
        delta[bad] = np.nextafter(delta[bad], toward)
    raise PatchMismatchError(f"delta of {name} cannot be represented exactly")


def make_patch(before: Mapping[str, np.ndarray], after: Mapping[str, np.ndarray],
               scope: ParamScope, metadata: Optional[Dict] = None) -> ModelPatch:
    """Deltas ``after - before`` over the scoped names, exact under addition"""
    scope = ParamScope(scope)
    names = [n for n in before if in_scope(n, scope)]
    missing = [n for n in names if n not in after]
    if missing:
        raise PatchMismatchError(f"target is missing parameters {missing[:5]}")
    deltas: Dict[str, np.ndarray] = {}
    for name in names:
        b = np.asarray(before[name], dtype=np.float64)
        a = np.asarray(after[name], dtype=np.float64)
        if a.shape != b.shape:
            raise PatchMismatchError(f"{name} changed shape from {b.shape} to {a.shape}")
        deltas[name] = _exact_delta(b, a, name)
    meta = dict(metadata or {})
    meta["scope"] = scope.value
    meta["result_fingerprint"] = fingerprint_arrays(after, names).hex()
    return ModelPatch(base_fingerprint=fingerprint_arrays(before, names), deltas=deltas, metadata=meta)


def apply_patch(model: Denoiser, patch: ModelPatch) -> Denoiser:
    """New model with the patch deltas added to the matching base weights"""
    unknown = [n for n in patch.names if n not in model.params]
    if unknown:
        raise PatchMismatchError(f"patch names not in model: {unknown[:5]}")
    for name, delta in patch.deltas.items():
        if delta.shape != model.params[name].shape:
            raise PatchMismatchError(f"{name}: patch shape {delta.shape}, model shape {model.params[name].shape}")
    current = model.fingerprint(patch.names)
    if current != patch.base_fingerprint:
        if patch.result_fingerprint is not None and current.hex() == patch.result_fingerprint:
            raise PatchMismatchError("patch is already applied to this model")
        raise PatchMismatchError(f"base fingerprint mismatch: model {current.hex()[:16]}, "
                                 f"patch {patch.base_fingerprint.hex()[:16]}")
    out = model.copy()
    out.load_state({name: model.params[name].data + delta for name, delta in patch.deltas.items()})
    if patch.result_fingerprint is not None and out.fingerprint(patch.names).hex() != patch.result_fingerprint:
        raise PatchMismatchError("patched weights do not reproduce the recorded result")
    logger.info("applied patch over %d parameters", patch.num_parameters())
    return out


def baseline_blacklist(model: Denoiser, concept: ConceptSpec) -> Denoiser:
    """Zero the token-embedding rows of the concept words"""
    if not concept.prompt_tokens:
        raise ConceptError(f"concept {concept.name!r} has no prompt tokens to blacklist")
    rows = sorted({model.vocab.index(word) for word in concept.prompt_tokens})
    table = model.params["text.token_embedding"].numpy()
    table[rows] = 0.0
    out = model.copy()
    out.load_state({"text.token_embedding": table})
    logger.info("blacklisted rows %s for %s", rows, concept.name)
    return out


def baseline_naive_finetune(model: Denoiser, concept: ConceptSpec, decoys: Sequence[np.ndarray],
                            cfg: NaiveFinetuneConfig, sched: NoiseSchedule,
                            log: Optional[TrainLog] = None, progress: bool = False,
                            on_step: Optional[StepCallback] = None) -> Denoiser:
    """Remap the concept prompt onto decoy images with the diffusion loss (full scope)"""
    if len(decoys) == 0:
        raise ConceptError("naive finetuning needs at least one decoy image")
    decoy_arr = np.stack([np.asarray(d, dtype=np.float64) for d in decoys])
    for ref in concept.reference_images:
        if any(np.array_equal(ref, d) for d in decoy_arr):
            raise ConceptError(f"decoy set contains a reference image of {concept.name!r}")

    work = model.copy()
    scope_names = list(select_params(work, ParamScope.FULL))
    work.set_trainable(scope_names)
    ids = tokenize_batch(concept.prompts(inverted=False), work.vocab, work.cfg.max_len)
    rng = rng_stream(cfg.seed, "forget")
    optimizer = SGD(cfg.lr)
    for step in tqdm(range(cfg.steps), desc="naive finetune", disable=not progress):
        started = time.perf_counter()
        pick = rng.integers(0, len(decoy_arr), size=cfg.batch)
        tpl = rng.integers(0, len(ids), size=cfg.batch)
        try:
            with Graph() as graph:
                loss = ddpm_loss(work, Tensor(decoy_arr[pick]), work.encode_ids(ids[tpl]), sched, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"naive finetuning loss became {value} at step {step}")
            for name in scope_names:
                work.params[name].zero_grad()
            backward(graph, loss, [work.params[n] for n in scope_names])
            optimizer.step(work.params, scope_names)
        except NonFiniteError as exc:
            raise DivergenceError(f"naive finetuning diverged at step {step}: {exc}") from exc
        if log is not None:
            log.append(value, time.perf_counter() - started)
        if on_step is not None:
            on_step(step + 1, work)
    work.freeze()
    return work
