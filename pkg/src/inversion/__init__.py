"""
Concept inversion

Learns placeholder token vectors (``<v0>``, ``<v1>``, ...) that make a frozen
denoiser reconstruct a set of reference images. The vectors are what a
prompt would need to contain to summon the concept, whether or not the
vocabulary has a word for it. Inversion serves two callers: forgetting can
target the learned placeholders instead of prompt words, and the
Memorization Score reads the pooled embedding of the learned placeholders.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import List, Sequence, Union

import numpy as np
from tqdm import tqdm

from ..denoiser import Denoiser
from ..diffusion import NoiseSchedule, ddpm_loss
from ..errors import ConceptError, DivergenceError, NonFiniteError
from ..models import InversionConfig
from ..tensor import Adam, Graph, Tensor, backward, rng_stream
from ..text import placeholder_token, tokenize, tokenize_batch

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "a photo of {}"


@dataclass
class InversionResult:
    """Learned placeholder vectors, shape (n_tokens, d_ctx), and the loss trace"""
    embeddings: np.ndarray
    losses: List[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def n_tokens(self) -> int:
        return self.embeddings.shape[0]


def placeholder_text(n_tokens: int) -> str:
    return " ".join(placeholder_token(k) for k in range(n_tokens))


def fill_templates(templates: Union[str, Sequence[str]], n_tokens: int) -> List[str]:
    """Put ``n_tokens`` placeholders into each template's ``{}`` slot"""
    if isinstance(templates, str):
        templates = [templates]
    slot = placeholder_text(n_tokens)
    return [t.format(slot) if "{}" in t else t for t in templates]


def initial_embeddings(model: Denoiser, cfg: InversionConfig) -> np.ndarray:
    """Starting vectors: the mean regular-word embedding, or seeded noise of matching scale"""
    table = model.params["text.token_embedding"].data
    regular = table[model.vocab.regular_ids()]
    if cfg.init == "mean-embedding":
        return np.repeat(regular.mean(axis=0, keepdims=True), cfg.n_tokens, axis=0)
    rng = rng_stream(cfg.seed, "invert")
    return regular.std() * rng.standard_normal((cfg.n_tokens, table.shape[1]))


def invert(model: Denoiser, images: Sequence[np.ndarray], template: Union[str, Sequence[str]],
           cfg: InversionConfig, sched: NoiseSchedule, progress: bool = False) -> InversionResult:
    """Optimize placeholder vectors against a frozen copy of ``model``.

    Each step draws reference images, a template, timesteps and noise and
    takes an Adam step on the diffusion loss with respect to the placeholder
    vectors only. The model's weights are checked to be unchanged afterwards.
    """
    if len(images) == 0:
        raise ConceptError("inversion needs at least one reference image")
    prompts = fill_templates(template, cfg.n_tokens)
    ids = tokenize_batch(prompts, model.vocab, model.cfg.max_len)
    for prompt, row in zip(prompts, ids):
        count = int(np.sum(model.vocab.placeholder_slots(row) >= 0))
        if count != cfg.n_tokens:
            raise ConceptError(f"template {prompt!r} has {count} placeholder slots, expected {cfg.n_tokens}")
    data = np.stack([np.asarray(img, dtype=np.float64) for img in images])

    frozen = model.copy()
    frozen.freeze()
    weights_before = frozen.fingerprint()
    start = initial_embeddings(frozen, cfg)
    result = InversionResult(embeddings=start.copy())
    if cfg.steps == 0:
        return result

    rng = rng_stream(cfg.seed, "invert")
    state = {"placeholders": Tensor(start, requires_grad=True, name="placeholders")}
    optimizer = Adam(cfg.lr)
    started = time.perf_counter()
    for step in tqdm(range(cfg.steps), desc="invert", disable=not progress):
        pick = rng.integers(0, len(data), size=cfg.batch)
        tpl = rng.integers(0, len(ids), size=cfg.batch)
        try:
            with Graph() as graph:
                ctx = frozen.encode_ids(ids[tpl], state["placeholders"])
                loss = ddpm_loss(frozen, Tensor(data[pick]), ctx, sched, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"inversion loss became {value} at step {step}")
            state["placeholders"].zero_grad()
            backward(graph, loss, [state["placeholders"]])
            optimizer.step(state, ["placeholders"])
        except NonFiniteError as exc:
            raise DivergenceError(f"inversion diverged at step {step}: {exc}") from exc
        result.losses.append(value)
        logger.debug("inversion step %d loss %.6f", step, value)

    if frozen.fingerprint() != weights_before or model.fingerprint() != weights_before:
        raise AssertionError("model weights changed during inversion")
    result.embeddings = state["placeholders"].numpy()
    result.seconds = time.perf_counter() - started
    logger.info("inverted %d token(s) in %d steps, loss %.5f -> %.5f",
                cfg.n_tokens, cfg.steps, result.losses[0], result.losses[-1])
    return result


def invert_for_score(model: Denoiser, images: Sequence[np.ndarray], reference_prompt: str,
                     cfg: InversionConfig, sched: NoiseSchedule,
                     template: Union[str, Sequence[str]] = DEFAULT_TEMPLATE) -> np.ndarray:
    """Pooled embedding of the inverted placeholders.

    ``reference_prompt`` is the concept's own wording (for example ``kiki``).
    After inversion through ``template``, the placeholders are encoded on
    their own, in the same layout as the reference prompt, so the two pooled
    vectors are comparable.
    """
    tokenize(reference_prompt, model.vocab, model.cfg.max_len)
    result = invert(model, images, template, cfg, sched)
    ctx = model.encode_prompts(placeholder_text(cfg.n_tokens), extra=result.embeddings)
    return ctx.pooled.numpy()
