"""
Data models for the concept-forgetting lab

This module defines the plain data structures passed between packages:
configuration records, concept descriptions, patches, training logs and
metric reports. Validation of each record's invariants happens in
``__post_init__`` so a bad value fails where it is created.
"""

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConceptError, ConfigError


class Category(str, Enum):
    """ConceptBench category of a concept"""
    IDENTITY = "identity"
    OBJECT = "object"
    STYLE = "style"


class ParamScope(str, Enum):
    """Which denoiser weights an optimizer may touch"""
    CA_ONLY = "ca"
    FULL = "full"


@dataclass(frozen=True)
class ScheduleConfig:
    """Linear beta schedule settings"""
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class SamplerConfig:
    """Ancestral sampler settings; ``steps`` must divide the schedule length"""
    steps: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"sampler steps must be positive, got {self.steps}")


@dataclass(frozen=True)
class DenoiserConfig:
    """Patch-transformer shape. Defaults are the reference configuration."""
    image_size: int = 16
    channels: int = 3
    patch: int = 2
    d_model: int = 64
    heads: int = 4
    blocks: int = 2
    d_ctx: int = 32
    time_dim: int = 64
    mlp_ratio: int = 4
    max_len: int = 8

    def __post_init__(self):
        for name in ("image_size", "channels", "patch", "d_model", "heads", "blocks",
                     "d_ctx", "time_dim", "mlp_ratio", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"denoiser.{name} must be positive")
        if self.image_size % self.patch:
            raise ConfigError(f"patch {self.patch} does not divide image side {self.image_size}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.time_dim % 2:
            raise ConfigError("time_dim must be even for the sinusoidal embedding")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.image_size, self.image_size, self.channels)

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    """Base-model training on the ConceptBench-mini corpus"""
    steps: int = 4000
    lr: float = 2e-3
    batch: int = 16
    renders_per_concept: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.lr <= 0 or self.renders_per_concept < 1:
            raise ConfigError("train config needs steps >= 0, batch >= 1, lr > 0, renders >= 1")


@dataclass
class ConceptSpec:
    """A concept to forget, invert or measure.

    The concept is named either by prompt words (``prompt_tokens``) or by
    inverted embedding vectors occupying placeholder slots. Templates carry a
    ``{}`` slot where the concept goes.
    """
    name: str
    category: Category = Category.IDENTITY
    prompt_tokens: Optional[Tuple[str, ...]] = None
    inverted_embeddings: Optional[np.ndarray] = None
    reference_images: List[np.ndarray] = field(default_factory=list)
    templates: List[str] = field(default_factory=lambda: ["a photo of {}"])
    ablation: bool = False

    def __post_init__(self):
        self.category = Category(self.category)
        if self.prompt_tokens is not None:
            self.prompt_tokens = tuple(self.prompt_tokens)
            if not self.prompt_tokens:
                raise ConceptError(f"concept {self.name!r} has an empty prompt")
        if self.inverted_embeddings is not None:
            self.inverted_embeddings = np.atleast_2d(np.asarray(self.inverted_embeddings, dtype=np.float64))
        has_prompt = self.prompt_tokens is not None
        has_inverted = self.inverted_embeddings is not None
        if not (has_prompt or has_inverted):
            raise ConceptError(f"concept {self.name!r} needs prompt tokens or inverted embeddings")
        if has_prompt and has_inverted and not self.ablation:
            raise ConceptError(f"concept {self.name!r} has both prompt tokens and inverted embeddings")
        if not self.reference_images:
            raise ConceptError(f"concept {self.name!r} has no reference images")
        if not self.templates or any("{}" not in t for t in self.templates):
            raise ConceptError(f"every template of {self.name!r} needs a '{{}}' slot")

    @property
    def uses_inversion(self) -> bool:
        return self.inverted_embeddings is not None

    @property
    def n_placeholders(self) -> int:
        return 0 if self.inverted_embeddings is None else self.inverted_embeddings.shape[0]

    def slot_text(self, inverted: Optional[bool] = None) -> str:
        """What fills the template slot: prompt words or placeholder tokens"""
        inverted = self.uses_inversion and not self.prompt_tokens if inverted is None else inverted
        if inverted:
            return " ".join(f"<v{k}>" for k in range(self.n_placeholders))
        return " ".join(self.prompt_tokens)

    def prompts(self, inverted: Optional[bool] = None) -> List[str]:
        slot = self.slot_text(inverted)
        return [t.format(slot) for t in self.templates]


@dataclass
class ForgetConfig:
    """Settings of one attention-resteering run"""
    concepts: List[ConceptSpec]
    scope: ParamScope = ParamScope.CA_ONLY
    steps: int = 60
    lr: float = 0.5
    batch: int = 4
    weights: Optional[List[float]] = None
    norm: str = "l2"
    reduce: str = "per_head"
    token_source: str = "auto"
    seed: int = 0

    def __post_init__(self):
        self.scope = ParamScope(self.scope)
        if not self.concepts:
            raise ConfigError("forgetting needs at least one concept")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.weights is None:
            self.weights = [1.0] * len(self.concepts)
        if len(self.weights) != len(self.concepts):
            raise ConfigError("one weight per concept is required")
        if self.norm not in ("l1", "l2"):
            raise ConfigError(f"norm must be 'l1' or 'l2', got {self.norm!r}")
        if self.reduce not in ("per_head", "head_mean"):
            raise ConfigError(f"reduce must be 'per_head' or 'head_mean', got {self.reduce!r}")
        if self.token_source not in ("auto", "prompt", "inverted"):
            raise ConfigError(f"token_source must be auto, prompt or inverted, got {self.token_source!r}")


@dataclass
class NaiveFinetuneConfig:
    """Settings of the naive-finetuning baseline"""
    steps: int = 60
    lr: float = 0.05
    batch: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.lr <= 0 or self.batch < 1:
            raise ConfigError("naive finetune needs steps >= 0, lr > 0, batch >= 1")


@dataclass(frozen=True)
class InversionConfig:
    """Concept-inversion settings"""
    n_tokens: int = 1
    steps: int = 150
    lr: float = 0.02
    batch: int = 4
    init: str = "mean-embedding"
    seed: int = 0

    def __post_init__(self):
        if self.n_tokens < 1:
            raise ConfigError(f"n_tokens must be >= 1, got {self.n_tokens}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.lr <= 0 or self.batch < 1:
            raise ConfigError("inversion needs lr > 0 and batch >= 1")
        if self.init not in ("mean-embedding", "random"):
            raise ConfigError(f"init must be 'mean-embedding' or 'random', got {self.init!r}")


@dataclass(frozen=True)
class MetricsConfig:
    """Measurement protocol settings"""
    memorization_runs: int = 5
    anchor_images: int = 8
    samples_per_concept: int = 64
    sample_steps: int = 50
    drift_seeds: int = 3
    probe_timesteps: Tuple[int, ...] = (20, 60, 100, 140, 180)

    def __post_init__(self):
        if self.memorization_runs < 1 or self.anchor_images < 1 or self.samples_per_concept < 1:
            raise ConfigError("metric counts must be positive")


@dataclass
class ModelPatch:
    """Weight deltas over a parameter scope, bound to a base fingerprint"""
    base_fingerprint: bytes
    deltas: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def names(self) -> List[str]:
        return list(self.deltas)

    @property
    def result_fingerprint(self) -> Optional[str]:
        return self.metadata.get("result_fingerprint")

    def is_empty(self) -> bool:
        return all(not np.any(d) for d in self.deltas.values())

    def num_parameters(self) -> int:
        return int(sum(d.size for d in self.deltas.values()))


@dataclass
class TrainLog:
    """Per-step record of an optimization run"""
    losses: List[float] = field(default_factory=list)
    target_mass: List[float] = field(default_factory=list)
    step_seconds: List[float] = field(default_factory=list)

    def append(self, loss: float, seconds: float, mass: Optional[float] = None) -> None:
        self.losses.append(float(loss))
        self.step_seconds.append(float(seconds))
        if mass is not None:
            self.target_mass.append(float(mass))

    def __len__(self) -> int:
        return len(self.losses)

    @property
    def wall_clock(self) -> float:
        return float(sum(self.step_seconds))

    def smoothed_mass(self, window: int = 10) -> List[float]:
        """Trailing-window means of the target attention mass"""
        mass = np.asarray(self.target_mass)
        if mass.size < window:
            return [float(mass.mean())] if mass.size else []
        kernel = np.ones(window) / window
        return [float(v) for v in np.convolve(mass, kernel, mode="valid")]


@dataclass
class MemorizationReport:
    """Memorization Score of one concept before and after forgetting"""
    concept: str
    initial_runs: List[float]
    forgetting_runs: List[float]
    excluded: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.initial_runs or not self.forgetting_runs:
            raise ConceptError(f"memorization report for {self.concept!r} has no valid runs")

    @property
    def runs(self) -> int:
        return max(len(self.initial_runs), len(self.forgetting_runs))

    @property
    def initial_score(self) -> float:
        return float(np.mean(self.initial_runs))

    @property
    def forgetting_score(self) -> float:
        return float(np.mean(self.forgetting_runs))

    @property
    def delta(self) -> float:
        return self.initial_score - self.forgetting_score

    @property
    def noise_band(self) -> float:
        """Spread of the per-run initial scores"""
        return float(np.max(self.initial_runs) - np.min(self.initial_runs))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "concept": self.concept,
            "initial_score": self.initial_score,
            "forgetting_score": self.forgetting_score,
            "delta": self.delta,
            "noise_band": self.noise_band,
            "runs": self.runs,
            "initial_runs": list(self.initial_runs),
            "forgetting_runs": list(self.forgetting_runs),
            "excluded": list(self.excluded),
        }


@dataclass
class ControlDrift:
    """Integrity measurements for one control concept"""
    concept: str
    accuracy_before: float
    accuracy_after: float
    l2_drift: float
    attention_ratio: float


@dataclass
class IntegrityReport:
    """Integrity measurements for every control concept of a run"""
    controls: List[ControlDrift] = field(default_factory=list)

    def by_concept(self) -> Dict[str, ControlDrift]:
        return {c.concept: c for c in self.controls}

    def max_drift(self) -> float:
        return max((c.l2_drift for c in self.controls), default=0.0)

    def to_dict(self) -> Dict[str, Any]:
        return {"controls": [asdict(c) for c in self.controls]}


def as_names(values: Sequence[str]) -> Tuple[str, ...]:
    """Normalize a comma string or sequence of names to a tuple"""
    if isinstance(values, str):
        values = values.split(",")
    return tuple(v.strip() for v in values if v.strip())
