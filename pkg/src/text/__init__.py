"""
Toy text conditioning: vocabulary, tokenizer and embedding encoder

Prompts are split on whitespace, mapped to vocabulary indices and padded to a
fixed length. The encoder turns indices into per-token context vectors
(token embedding plus learned position) and a pooled summary vector used by
the Memorization Score. Placeholder tokens ``<v0>``, ``<v1>``, ... take their
vectors verbatim from caller-supplied inverted embeddings.
"""

import hashlib
import logging
import re
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from ..errors import ConceptError, ShapeError, VocabularyError
from ..models import ConceptSpec
from ..tensor import Tensor, add, gather, linear, matmul, mul, reshape

logger = logging.getLogger(__name__)

PAD = "<pad>"
PLACEHOLDER = re.compile(r"^<v(\d+)>$")
MAX_VOCAB = 256


def placeholder_token(slot: int) -> str:
    return f"<v{slot}>"


class Vocabulary:
    """Ordered word list; index 0 is padding, no duplicates"""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if not tokens or tokens[0] != PAD:
            raise VocabularyError(f"index 0 must be {PAD!r}")
        if len(tokens) > MAX_VOCAB:
            raise VocabularyError(f"vocabulary holds at most {MAX_VOCAB} entries, got {len(tokens)}")
        index: Dict[str, int] = {}
        for i, token in enumerate(tokens):
            if not token or any(ch.isspace() for ch in token):
                raise VocabularyError(f"invalid vocabulary entry {token!r}")
            if token in index:
                raise VocabularyError(f"duplicate vocabulary entry {token!r}")
            index[token] = i
        self.tokens = tokens
        self._index = index
        slots = np.full(len(tokens), -1, dtype=np.int64)
        for i, token in enumerate(tokens):
            match = PLACEHOLDER.match(token)
            if match:
                slots[i] = int(match.group(1))
        self._slots = slots

    @classmethod
    def build(cls, words: Iterable[str], placeholders: int = 4) -> "Vocabulary":
        """Vocabulary of ``words`` (first occurrence order) plus placeholder slots"""
        tokens = [PAD]
        for word in words:
            if word not in tokens:
                tokens.append(word)
        tokens.extend(placeholder_token(k) for k in range(placeholders) if placeholder_token(k) not in tokens)
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def index(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise VocabularyError(f"unknown word {word!r}") from None

    def is_placeholder(self, word: str) -> bool:
        return PLACEHOLDER.match(word) is not None

    def placeholder_slots(self, ids: np.ndarray) -> np.ndarray:
        """Slot number per position, -1 where the token is not a placeholder"""
        return self._slots[np.asarray(ids, dtype=np.int64)]

    def regular_ids(self) -> np.ndarray:
        """Indices of every non-pad, non-placeholder entry"""
        return np.array([i for i in range(1, len(self.tokens)) if self._slots[i] < 0], dtype=np.int64)

    def to_text(self) -> str:
        return "\n".join(self.tokens) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        return cls([line for line in text.splitlines() if line])

    def digest(self) -> bytes:
        """SHA-256 of the serialized vocabulary"""
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()


@dataclass
class ContextEmbedding:
    """Per-token context vectors, their pooled summary and the source ids.

    Shapes are (L, d) / (d,) for one prompt or (N, L, d) / (N, d) for a batch.
    """
    per_token: Tensor
    pooled: Tensor
    token_ids: np.ndarray

    @property
    def batch(self) -> int:
        return self.per_token.shape[0] if self.per_token.ndim == 3 else 1


def tokenize(prompt: str, vocab: Vocabulary, max_len: int = 8, checked: bool = True) -> np.ndarray:
    """Whitespace tokenizer padded (or truncated) to ``max_len``"""
    ids: List[int] = []
    for word in prompt.split():
        if word in vocab:
            ids.append(vocab.index(word))
        elif checked:
            raise VocabularyError(f"unknown word {word!r} in prompt {prompt!r}")
        else:
            logger.warning("dropping unknown word %r", word)
    if len(ids) > max_len:
        logger.warning("prompt %r truncated to %d tokens", prompt, max_len)
        ids = ids[:max_len]
    out = np.zeros(max_len, dtype=np.int64)
    out[:len(ids)] = ids
    return out


def tokenize_batch(prompts: Sequence[str], vocab: Vocabulary, max_len: int = 8) -> np.ndarray:
    return np.stack([tokenize(p, vocab, max_len) for p in prompts])


def init_text_params(vocab_size: int, d_ctx: int, max_len: int, rng: np.random.Generator) -> Dict[str, Tensor]:
    """Seeded initial weights of the text encoder"""
    return {
        "text.token_embedding": Tensor(rng.standard_normal((vocab_size, d_ctx))),
        "text.position_embedding": Tensor(0.1 * rng.standard_normal((max_len, d_ctx))),
        "text.pooler.weight": Tensor(rng.standard_normal((d_ctx, d_ctx)) / np.sqrt(d_ctx)),
        "text.pooler.bias": Tensor(np.zeros(d_ctx)),
    }


def encode(ids: np.ndarray, params: Mapping[str, Tensor], vocab: Vocabulary,
           extra: Optional[Tensor] = None) -> ContextEmbedding:
    """Embed token ids; placeholder positions take rows of ``extra`` verbatim.

    ``per_token = table[ids] + position`` everywhere else, and
    ``pooled = pooler(mean of per_token over non-pad positions)``. The result
    is differentiable with respect to the tables and ``extra``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    batch_ids = ids[None, :] if single else ids
    table = params["text.token_embedding"]
    position = params["text.position_embedding"]
    n, length = batch_ids.shape
    if length != position.shape[0]:
        raise ShapeError(f"prompt length {length} does not match encoder length {position.shape[0]}")
    if batch_ids.min() < 0 or batch_ids.max() >= table.shape[0]:
        raise VocabularyError("token id outside the vocabulary")

    tokens = add(gather(table, batch_ids), position)
    slots = vocab.placeholder_slots(batch_ids)
    if np.any(slots >= 0):
        if extra is None:
            raise VocabularyError("prompt has placeholder tokens but no inverted embeddings were given")
        if extra.ndim != 2 or extra.shape[1] != table.shape[1]:
            raise ShapeError(f"inverted embeddings must have shape (k, {table.shape[1]}), got {extra.shape}")
        if slots.max() >= extra.shape[0]:
            raise VocabularyError(f"placeholder slot {int(slots.max())} has no inverted embedding")
        keep = (slots < 0).astype(np.float64)[..., None]
        select = np.zeros((n, length, extra.shape[0]))
        rows, cols = np.nonzero(slots >= 0)
        select[rows, cols, slots[rows, cols]] = 1.0
        tokens = add(mul(tokens, keep), matmul(select, extra))

    nonpad = (batch_ids != 0).astype(np.float64)
    counts = np.maximum(nonpad.sum(axis=1, keepdims=True), 1.0)
    weights = (nonpad / counts)[:, None, :]
    pooled_in = reshape(matmul(weights, tokens), (n, table.shape[1]))
    pooled = linear(pooled_in, params["text.pooler.weight"], params["text.pooler.bias"])

    if single:
        tokens = reshape(tokens, tokens.shape[1:])
        pooled = reshape(pooled, pooled.shape[1:])
    return ContextEmbedding(per_token=tokens, pooled=pooled, token_ids=ids)


def _concept_positions(ids: np.ndarray, concept: ConceptSpec, vocab: Vocabulary, inverted: bool) -> List[int]:
    if inverted:
        slots = vocab.placeholder_slots(ids)
        found = [int(i) for i in np.nonzero((slots >= 0) & (slots < concept.n_placeholders))[0]]
    else:
        pattern = [vocab.index(w) for w in concept.prompt_tokens]
        k = len(pattern)
        found = []
        for start in range(len(ids) - k + 1):
            if list(ids[start:start + k]) == pattern:
                found.extend(range(start, start + k))
    if not found:
        raise ConceptError(f"concept {concept.name!r} does not occur in the prompt")
    return found


def target_positions(ids: np.ndarray, concepts: Union[ConceptSpec, Sequence[ConceptSpec]],
                     vocab: Vocabulary, inverted: Optional[bool] = None) -> List[int]:
    """0-based positions of every concept token or placeholder in ``ids``.

    Several concepts give the sorted union of their positions.
    """
    if isinstance(concepts, ConceptSpec):
        concepts = [concepts]
    ids = np.asarray(ids, dtype=np.int64)
    positions = set()
    for concept in concepts:
        use_inverted = (concept.uses_inversion and not concept.prompt_tokens) if inverted is None else inverted
        positions.update(_concept_positions(ids, concept, vocab, use_inverted))
    return sorted(positions)
