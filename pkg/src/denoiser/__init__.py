"""
Patch-transformer noise predictor

This module builds the conditional epsilon-predictor. An image is cut into
non-overlapping patches, each patch becomes a token, and every block applies
self-attention over the patch tokens, cross-attention from the patch tokens
to the prompt context, and a gated feed-forward layer. The post-softmax
cross-attention maps can be recorded during the forward pass; they stay on
the differentiation graph so a loss can be attached to them.

Parameters live in a flat name -> Tensor mapping. Names are stable across
runs and are what scopes, checkpoints and patches refer to.
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from ..errors import ShapeError
from ..models import DenoiserConfig, ParamScope
from ..tensor import (Tensor, add, gelu, layer_norm, linear, matmul, mul, reshape, rng_stream, scale,
                      softmax, take, transpose)
from ..text import ContextEmbedding, Vocabulary, encode, init_text_params, tokenize_batch

logger = logging.getLogger(__name__)

TEXT_PREFIX = "text."
CA_PROJECTIONS = ("q", "k", "v", "o")


@dataclass
class AttentionRecord:
    """Post-softmax cross-attention maps of one forward pass.

    ``maps[b]`` has shape (N, heads, m, L): batch item, head, patch query,
    context position. The maps are graph-connected tensors.
    """
    maps: List[Tensor]
    t: np.ndarray
    token_ids: Optional[np.ndarray] = None

    @property
    def num_blocks(self) -> int:
        return len(self.maps)

    @property
    def heads(self) -> int:
        return self.maps[0].shape[1]

    def map(self, block: int, head: int, item: int = 0) -> np.ndarray:
        """(m, L) attention probabilities of one block, head and batch item"""
        return self.maps[block].data[item, head]

    def mass(self, mask: np.ndarray) -> float:
        """Mean attention mass on the masked context columns.

        ``mask`` is (N, L) with ones at target positions. Averaged over
        blocks, heads, batch items and patch queries.
        """
        weights = np.asarray(mask, dtype=np.float64)[:, None, None, :]
        return float(np.mean([np.mean(np.sum(a.data * weights, axis=-1)) for a in self.maps]))


def position_mask(positions: Union[Sequence[int], Sequence[Sequence[int]]], batch: int, length: int) -> np.ndarray:
    """(batch, length) 0/1 mask from shared or per-item position lists"""
    mask = np.zeros((batch, length))
    per_item = len(positions) > 0 and not np.isscalar(positions[0])
    rows = positions if per_item else [positions] * batch
    if len(rows) != batch:
        raise ShapeError(f"got positions for {len(rows)} items, batch has {batch}")
    for i, row in enumerate(rows):
        for j in row:
            if not 0 <= j < length:
                raise ShapeError(f"position {j} outside [0, {length})")
            mask[i, j] = 1.0
    return mask


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (N, dim)"""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, length, d = x.shape
    return transpose(reshape(x, (n, length, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    n, heads, length, d_head = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (n, length, heads * d_head))


def attention(q_in: Tensor, kv_in: Tensor, weights: Mapping[str, Tensor], heads: int):
    """Multi-head scaled dot-product attention of ``q_in`` over ``kv_in``.

    ``weights`` holds ``q.weight``, ``k.weight``, ``v.weight``, ``o.weight``
    and optionally the matching biases. Returns ``(out, probs)`` with probs
    of shape (N, heads, queries, keys).
    """
    d_model = weights["q.weight"].shape[1]
    if d_model % heads:
        raise ShapeError(f"d_model {d_model} is not divisible by {heads} heads")
    if q_in.ndim != 3 or kv_in.ndim != 3:
        raise ShapeError(f"attention inputs must be (N, tokens, d), got {q_in.shape} and {kv_in.shape}")
    q = _split_heads(linear(q_in, weights["q.weight"], weights.get("q.bias")), heads)
    k = _split_heads(linear(kv_in, weights["k.weight"], weights.get("k.bias")), heads)
    v = _split_heads(linear(kv_in, weights["v.weight"], weights.get("v.bias")), heads)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d_model // heads))
    probs = softmax(scores, axis=-1)
    out = linear(_merge_heads(matmul(probs, v)), weights["o.weight"], weights.get("o.bias"))
    return out, probs


def cross_attention(q_tokens: Tensor, ctx: Tensor, weights: Mapping[str, Tensor], heads: int):
    """Patch tokens (queries) attending to context tokens (keys and values).

    ``ctx`` is (L, d_ctx) for a prompt shared by the batch or (N, L, d_ctx).
    Returns ``(out, attn)``; attn is per head, before any averaging.
    """
    if ctx.ndim == 2:
        ctx = reshape(ctx, (1,) + ctx.shape)
    if ctx.shape[0] not in (1, q_tokens.shape[0]):
        raise ShapeError(f"context batch {ctx.shape[0]} does not match query batch {q_tokens.shape[0]}")
    return attention(q_tokens, ctx, weights, heads)


def _sub(params: Mapping[str, Tensor], prefix: str) -> Dict[str, Tensor]:
    cut = len(prefix)
    return {name[cut:]: p for name, p in params.items() if name.startswith(prefix)}


def in_scope(name: str, scope: ParamScope) -> bool:
    """Whether a parameter name belongs to a scope"""
    scope = ParamScope(scope)
    if name.startswith(TEXT_PREFIX):
        return False
    if scope is ParamScope.FULL:
        return True
    parts = name.split(".")
    return (len(parts) == 5 and parts[0] == "blocks" and parts[2] == "xattn"
            and parts[3] in CA_PROJECTIONS
            and (parts[4] == "weight" or (parts[3] == "o" and parts[4] == "bias")))


def fingerprint_arrays(arrays: Mapping[str, Union[np.ndarray, Tensor]], names: Optional[Iterable[str]] = None) -> bytes:
    """SHA-256 over (name, shape, little-endian float64 bytes) in name order"""
    digest = hashlib.sha256()
    for name in sorted(arrays if names is None else names):
        value = arrays[name]
        data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        digest.update(name.encode("utf-8"))
        digest.update(repr(tuple(data.shape)).encode("ascii"))
        digest.update(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return digest.digest()


class Denoiser:
    """Conditional epsilon-predictor plus the text encoder tables it reads"""

    def __init__(self, cfg: DenoiserConfig, vocab: Vocabulary, params: Dict[str, Tensor]):
        self.cfg = cfg
        self.vocab = vocab
        self.params = params
        shapes = expected_shapes(cfg, len(vocab))
        missing = set(shapes) - set(params)
        if missing:
            raise ShapeError(f"missing parameters: {sorted(missing)[:5]}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ShapeError(f"parameter {name} has shape {params[name].shape}, expected {shape}")

    # Parameters

    @property
    def names(self) -> List[str]:
        return list(self.params)

    def num_parameters(self, names: Optional[Iterable[str]] = None) -> int:
        return int(sum(self.params[n].size for n in (self.params if names is None else names)))

    def copy(self) -> "Denoiser":
        """Independent model sharing the (read-only) weight buffers"""
        params = {name: Tensor._wrap(p.data) for name, p in self.params.items()}
        for name, p in params.items():
            p.name = name
        return Denoiser(self.cfg, self.vocab, params)

    def set_trainable(self, names: Iterable[str]) -> None:
        """Mark exactly ``names`` as requiring gradients"""
        wanted = set(names)
        unknown = wanted - set(self.params)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        for name, p in list(self.params.items()):
            fresh = Tensor._wrap(p.data, requires_grad=name in wanted)
            fresh.name = name
            self.params[name] = fresh

    def freeze(self) -> None:
        self.set_trainable(())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            if np.shape(value) != self.params[name].shape:
                raise ShapeError(f"parameter {name} has shape {self.params[name].shape}, got {np.shape(value)}")
            fresh = Tensor(value, requires_grad=self.params[name].requires_grad)
            fresh.name = name
            self.params[name] = fresh

    def fingerprint(self, names: Optional[Iterable[str]] = None) -> bytes:
        return fingerprint_arrays(self.params, names)

    # Text side

    def encode_ids(self, ids: np.ndarray, extra: Optional[Tensor] = None) -> ContextEmbedding:
        return encode(ids, self.params, self.vocab, extra)

    def encode_prompts(self, prompts: Union[str, Sequence[str]], extra: Optional[Union[Tensor, np.ndarray]] = None) -> ContextEmbedding:
        """Tokenize and encode one prompt or a batch of prompts"""
        if extra is not None and not isinstance(extra, Tensor):
            extra = Tensor(extra)
        if isinstance(prompts, str):
            return self.encode_ids(tokenize_batch([prompts], self.vocab, self.cfg.max_len)[0], extra)
        return self.encode_ids(tokenize_batch(list(prompts), self.vocab, self.cfg.max_len), extra)

    # Image side

    def _patchify(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        n = x.shape[0]
        g, p = cfg.grid, cfg.patch
        x = reshape(x, (n, g, p, g, p, cfg.channels))
        x = transpose(x, (0, 1, 3, 2, 4, 5))
        return reshape(x, (n, cfg.num_patches, cfg.patch_dim))

    def _unpatchify(self, tokens: Tensor) -> Tensor:
        cfg = self.cfg
        n = tokens.shape[0]
        g, p = cfg.grid, cfg.patch
        x = reshape(tokens, (n, g, g, p, p, cfg.channels))
        x = transpose(x, (0, 1, 3, 2, 4, 5))
        return reshape(x, (n,) + cfg.image_shape)

    def _feed_forward(self, x: Tensor, prefix: str) -> Tensor:
        hidden = self.cfg.d_model * self.cfg.mlp_ratio
        proj = linear(x, self.params[prefix + "ff.proj.weight"], self.params[prefix + "ff.proj.bias"])
        value = take(proj, np.arange(hidden), axis=-1)
        gate = take(proj, np.arange(hidden, 2 * hidden), axis=-1)
        return linear(mul(value, gelu(gate)), self.params[prefix + "ff.out.weight"], self.params[prefix + "ff.out.bias"])

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return layer_norm(x, self.params[prefix + ".weight"], self.params[prefix + ".bias"])

    def forward(self, x_t: Tensor, t, ctx: ContextEmbedding, record: bool = False):
        """Predict the noise in ``x_t`` at steps ``t`` given prompt context.

        Returns ``(eps_hat, record)``; ``record`` is an AttentionRecord when
        requested, else None.
        """
        cfg = self.cfg
        if x_t.ndim != 4 or x_t.shape[1:] != cfg.image_shape:
            raise ShapeError(f"expected images of shape (N, {cfg.image_shape}), got {x_t.shape}")
        n = x_t.shape[0]
        steps = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        ctx_tokens = ctx.per_token
        if ctx_tokens.shape[-1] != cfg.d_ctx or ctx_tokens.shape[-2] != cfg.max_len:
            raise ShapeError(f"context must end in ({cfg.max_len}, {cfg.d_ctx}), got {ctx_tokens.shape}")
        p = self.params

        h = add(linear(self._patchify(x_t), p["patch_embed.weight"], p["patch_embed.bias"]), p["pos_embed"])
        temb = Tensor._wrap(timestep_embedding(steps, cfg.time_dim))
        temb = linear(gelu(linear(temb, p["time.fc1.weight"], p["time.fc1.bias"])),
                      p["time.fc2.weight"], p["time.fc2.bias"])
        h = add(h, reshape(temb, (n, 1, cfg.d_model)))

        maps: List[Tensor] = []
        for i in range(cfg.blocks):
            prefix = f"blocks.{i}."
            a = self._norm(h, prefix + "norm1")
            out, _ = attention(a, a, _sub(p, prefix + "attn."), cfg.heads)
            h = add(h, out)
            a = self._norm(h, prefix + "norm2")
            out, probs = cross_attention(a, ctx_tokens, _sub(p, prefix + "xattn."), cfg.heads)
            h = add(h, out)
            maps.append(probs)
            h = add(h, self._feed_forward(self._norm(h, prefix + "norm3"), prefix))

        out = linear(self._norm(h, "final_norm"), p["head.weight"], p["head.bias"])
        eps_hat = self._unpatchify(out)
        rec = AttentionRecord(maps=maps, t=steps, token_ids=ctx.token_ids) if record else None
        return eps_hat, rec

    def __call__(self, x_t: Tensor, t, ctx: ContextEmbedding, record: bool = False):
        return self.forward(x_t, t, ctx, record)


def expected_shapes(cfg: DenoiserConfig, vocab_size: int) -> Dict[str, tuple]:
    """Name -> shape of every parameter, in creation order"""
    d, hidden = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    shapes: Dict[str, tuple] = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "pos_embed": (cfg.num_patches, d),
        "time.fc1.weight": (cfg.time_dim, 4 * d),
        "time.fc1.bias": (4 * d,),
        "time.fc2.weight": (4 * d, d),
        "time.fc2.bias": (d,),
    }
    for i in range(cfg.blocks):
        b = f"blocks.{i}."
        for norm in ("norm1", "norm2", "norm3"):
            shapes[b + norm + ".weight"] = (d,)
            shapes[b + norm + ".bias"] = (d,)
        for proj in CA_PROJECTIONS:
            shapes[b + f"attn.{proj}.weight"] = (d, d)
            shapes[b + f"attn.{proj}.bias"] = (d,)
        shapes[b + "xattn.q.weight"] = (d, d)
        shapes[b + "xattn.k.weight"] = (cfg.d_ctx, d)
        shapes[b + "xattn.v.weight"] = (cfg.d_ctx, d)
        shapes[b + "xattn.o.weight"] = (d, d)
        shapes[b + "xattn.o.bias"] = (d,)
        shapes[b + "ff.proj.weight"] = (d, 2 * hidden)
        shapes[b + "ff.proj.bias"] = (2 * hidden,)
        shapes[b + "ff.out.weight"] = (hidden, d)
        shapes[b + "ff.out.bias"] = (d,)
    shapes["final_norm.weight"] = (d,)
    shapes["final_norm.bias"] = (d,)
    shapes["head.weight"] = (d, cfg.patch_dim)
    shapes["head.bias"] = (cfg.patch_dim,)
    shapes["text.token_embedding"] = (vocab_size, cfg.d_ctx)
    shapes["text.position_embedding"] = (cfg.max_len, cfg.d_ctx)
    shapes["text.pooler.weight"] = (cfg.d_ctx, cfg.d_ctx)
    shapes["text.pooler.bias"] = (cfg.d_ctx,)
    return shapes


def param_count(cfg: DenoiserConfig, vocab_size: int = 0, include_text: bool = False) -> int:
    """Closed-form parameter count of the denoiser (optionally with text tables)"""
    d, c, hidden = cfg.d_model, cfg.d_ctx, cfg.d_model * cfg.mlp_ratio
    per_block = (3 * 2 * d                       # layer norms
                 + 4 * (d * d + d)               # self-attention
                 + 2 * d * d + 2 * c * d + d     # cross-attention
                 + d * 2 * hidden + 2 * hidden   # gated projection
                 + hidden * d + d)               # output projection
    total = (cfg.patch_dim * d + d + cfg.num_patches * d
             + cfg.time_dim * 4 * d + 4 * d + 4 * d * d + d
             + cfg.blocks * per_block
             + 2 * d + d * cfg.patch_dim + cfg.patch_dim)
    if include_text:
        total += vocab_size * c + cfg.max_len * c + c * c + c
    return total


def init_model(cfg: DenoiserConfig, vocab: Vocabulary, seed: int = 0) -> Denoiser:
    """Seeded initialization.

    Weights are N(0, 1/fan_in), biases zero, layer-norm gains one, positional
    tables N(0, 0.02^2); the output head is additionally scaled by 0.1.
    """
    rng = rng_stream(seed, "init")
    params: Dict[str, Tensor] = {}
    for name, shape in expected_shapes(cfg, len(vocab)).items():
        if name.startswith(TEXT_PREFIX):
            continue
        if name == "pos_embed":
            value = 0.02 * rng.standard_normal(shape)
        elif name.endswith(".bias"):
            value = np.zeros(shape)
        elif "norm" in name:
            value = np.ones(shape)
        else:
            value = rng.standard_normal(shape) / np.sqrt(shape[0])
            if name == "head.weight":
                value = 0.1 * value
        params[name] = Tensor(value, name=name)
    for name, tensor in init_text_params(len(vocab), cfg.d_ctx, cfg.max_len, rng).items():
        tensor.name = name
        params[name] = tensor
    logger.debug("initialized denoiser with %d parameters", sum(p.size for p in params.values()))
    return Denoiser(cfg, vocab, params)


def select_params(model: Denoiser, scope: ParamScope) -> Dict[str, Tensor]:
    """Parameters of ``scope`` in stable (creation) order"""
    return {name: p for name, p in model.params.items() if in_scope(name, scope)}
