"""
Run configuration

This module holds the pydantic schema of a run configuration (the file
``bench`` consumes and the other subcommands accept through ``--config``) and
of concept spec files. Every section converts to the matching library
dataclass with ``to_dataclass()``. Loading reports JSON syntax errors with
line and column and schema violations with dotted field paths.
"""

import json
import logging
import re
from pathlib import Path
from typing import Any, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..bench import DominanceSpec, catalog, get_concept, renders
from ..errors import ConfigError, ResteerError
from ..models import (Category, ConceptSpec, DenoiserConfig, ForgetConfig, InversionConfig, MetricsConfig,
                      NaiveFinetuneConfig, ScheduleConfig, TrainConfig)
from ..storage import load_embeddings, load_ppm

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ScheduleSection(_Section):
    T: int = Field(200, ge=2)
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(0.02, gt=0, lt=1)

    @model_validator(mode="after")
    def _ordered(self):
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        return self

    def to_dataclass(self) -> ScheduleConfig:
        return ScheduleConfig(T=self.T, beta_start=self.beta_start, beta_end=self.beta_end)


class DenoiserSection(_Section):
    image_size: int = Field(16, ge=1)
    channels: int = Field(3, ge=1)
    patch: int = Field(2, ge=1)
    d_model: int = Field(64, ge=1)
    heads: int = Field(4, ge=1)
    blocks: int = Field(2, ge=1)
    d_ctx: int = Field(32, ge=1)
    time_dim: int = Field(64, ge=2)
    mlp_ratio: int = Field(4, ge=1)
    max_len: int = Field(8, ge=1)

    def to_dataclass(self) -> DenoiserConfig:
        return DenoiserConfig(**self.model_dump())


class TrainSection(_Section):
    steps: int = Field(4000, ge=0)
    lr: float = Field(2e-3, gt=0)
    batch: int = Field(16, ge=1)
    renders_per_concept: int = Field(64, ge=1)

    def to_dataclass(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.model_dump())


class ForgetSection(_Section):
    scope: Literal["ca", "full"] = "ca"
    steps: int = Field(60, ge=0)
    lr: float = Field(0.5, gt=0)
    batch: int = Field(4, ge=1)
    weights: Optional[List[float]] = None
    norm: Literal["l1", "l2"] = "l2"
    reduce: Literal["per_head", "head_mean"] = "per_head"
    token_source: Literal["auto", "prompt", "inverted"] = "auto"

    def to_dataclass(self, concepts: List[ConceptSpec], seed: int) -> ForgetConfig:
        return ForgetConfig(concepts=concepts, seed=seed, **self.model_dump())


class NaiveSection(_Section):
    steps: int = Field(60, ge=0)
    lr: float = Field(0.05, gt=0)
    batch: int = Field(4, ge=1)
    decoys: int = Field(16, ge=1)

    def to_dataclass(self, seed: int) -> NaiveFinetuneConfig:
        return NaiveFinetuneConfig(steps=self.steps, lr=self.lr, batch=self.batch, seed=seed)


class InversionSection(_Section):
    n_tokens: int = Field(1, ge=1)
    steps: int = Field(150, ge=0)
    lr: float = Field(0.02, gt=0)
    batch: int = Field(4, ge=1)
    init: Literal["mean-embedding", "random"] = "mean-embedding"

    def to_dataclass(self, seed: int) -> InversionConfig:
        return InversionConfig(seed=seed, **self.model_dump())


class MetricsSection(_Section):
    memorization_runs: int = Field(5, ge=1)
    anchor_images: int = Field(8, ge=1)
    samples_per_concept: int = Field(64, ge=1)
    sample_steps: int = Field(50, ge=1)
    drift_seeds: int = Field(3, ge=1)
    probe_timesteps: List[int] = Field(default_factory=lambda: [20, 60, 100, 140, 180], min_length=1)

    def to_dataclass(self) -> MetricsConfig:
        data = self.model_dump()
        data["probe_timesteps"] = tuple(data["probe_timesteps"])
        return MetricsConfig(**data)


class DominanceSection(_Section):
    word: str = "fruit"
    major: str = "kiki"
    minor: str = "bobo"
    ratio: int = Field(9, ge=1)

    def to_dataclass(self) -> DominanceSpec:
        return DominanceSpec(**self.model_dump())


class AblationSection(_Section):
    concepts: List[str] = Field(default_factory=lambda: ["kiki", "cross"], min_length=1)
    steps: int = Field(120, ge=1)
    lr: Optional[float] = Field(None, gt=0)
    eval_every: int = Field(10, ge=1)
    drift_threshold: float = Field(2.0, gt=0)
    samples: int = Field(16, ge=1)


class BenchmarkSection(_Section):
    base_checkpoint: Optional[str] = None
    concepts: List[str] = Field(default_factory=lambda: [c.name for c in catalog()], min_length=2)
    targets: List[str] = Field(default_factory=lambda: ["kiki"], min_length=1)
    controls: Optional[List[str]] = None
    method: Literal["fmn", "blacklist", "naive"] = "fmn"
    compare: List[Literal["fmn", "blacklist", "naive"]] = Field(default_factory=list)
    scenarios: List[Literal["ablation", "recoverability", "correction"]] = Field(default_factory=list)
    reference_images: int = Field(8, ge=1)
    reference_seed: int = 1
    grid_samples: int = Field(8, ge=1)
    dominance: Optional[DominanceSection] = None
    ablation: AblationSection = Field(default_factory=AblationSection)

    @model_validator(mode="after")
    def _known_concepts(self):
        known = {c.name for c in catalog()}
        for field_name in ("concepts", "targets", "controls"):
            unknown = [n for n in getattr(self, field_name) or [] if n not in known]
            if unknown:
                raise ValueError(f"{field_name} names unknown concepts {unknown}")
        for field_name in ("targets", "controls"):
            outside = [n for n in getattr(self, field_name) or [] if n not in self.concepts]
            if outside:
                raise ValueError(f"{field_name} {outside} are not among the trained concepts")
        if self.controls and set(self.controls) & set(self.targets):
            raise ValueError("a concept cannot be both a target and a control")
        if "correction" in self.scenarios and self.dominance is None:
            raise ValueError("the correction scenario needs a dominance section")
        if self.dominance is not None:
            for name in (self.dominance.major, self.dominance.minor):
                if name not in self.concepts:
                    raise ValueError(f"dominance concept {name!r} is not among the trained concepts")
            if self.dominance.word in known:
                raise ValueError(f"dominance word {self.dominance.word!r} collides with a concept name")
        return self

    def control_names(self) -> List[str]:
        if self.controls is not None:
            return list(self.controls)
        return [n for n in self.concepts if n not in self.targets]

    def dominance_spec(self) -> Optional[DominanceSpec]:
        return None if self.dominance is None else self.dominance.to_dataclass()


class RunConfig(_Section):
    """Everything a benchmark run needs, validated before any computation"""
    seed: int = 0
    schedule: ScheduleSection = Field(default_factory=ScheduleSection)
    denoiser: DenoiserSection = Field(default_factory=DenoiserSection)
    train: TrainSection = Field(default_factory=TrainSection)
    forget: ForgetSection = Field(default_factory=ForgetSection)
    naive: NaiveSection = Field(default_factory=NaiveSection)
    inversion: InversionSection = Field(default_factory=InversionSection)
    metrics: MetricsSection = Field(default_factory=MetricsSection)
    benchmark: BenchmarkSection = Field(default_factory=BenchmarkSection)

    @model_validator(mode="after")
    def _consistent(self):
        if self.schedule.T % self.metrics.sample_steps:
            raise ValueError(f"metrics.sample_steps {self.metrics.sample_steps} must divide schedule.T {self.schedule.T}")
        late = [t for t in self.metrics.probe_timesteps if not 0 <= t < self.schedule.T]
        if late:
            raise ValueError(f"metrics.probe_timesteps {late} fall outside [0, {self.schedule.T})")
        weights = self.forget.weights
        if weights is not None and len(weights) != len(self.benchmark.targets):
            raise ValueError("forget.weights needs one weight per benchmark target")
        return self

    def to_dataclasses(self):
        """Library configs keyed by section name"""
        return {
            "schedule": self.schedule.to_dataclass(),
            "denoiser": self.denoiser.to_dataclass(),
            "train": self.train.to_dataclass(self.seed),
            "naive": self.naive.to_dataclass(self.seed),
            "inversion": self.inversion.to_dataclass(self.seed),
            "metrics": self.metrics.to_dataclass(),
        }

    def with_seed(self, seed: int) -> "RunConfig":
        return self.model_copy(update={"seed": seed})


def _line_of(text: str, loc) -> Optional[int]:
    """1-based line of the innermost key of ``loc`` that can be found in ``text``"""
    pos, line = 0, None
    for part in loc:
        if not isinstance(part, str):
            continue
        match = re.compile(r'"%s"\s*:' % re.escape(part)).search(text, pos)
        if match is None:
            break
        pos = match.end()
        line = text.count("\n", 0, match.start()) + 1
    return line


def format_validation_error(exc: ValidationError, text: Optional[str] = None, source: str = "config") -> str:
    lines = [f"{source}: {exc.error_count()} invalid field(s)"]
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        where = _line_of(text, err["loc"]) if text else None
        suffix = f" (line {where})" if where else ""
        lines.append(f"  {path}{suffix}: {err['msg']}")
    return "\n".join(lines)


def _load_json(path: PathLike) -> Tuple[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        return text, json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def parse_run_config(data: Any, text: Optional[str] = None, source: str = "config") -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(format_validation_error(exc, text, source)) from exc


def load_run_config(path: PathLike) -> RunConfig:
    """Read and validate a run configuration file"""
    text, data = _load_json(path)
    cfg = parse_run_config(data, text, str(path))
    logger.info("loaded run config %s", path)
    return cfg


# Concept spec files

class RenderSource(_Section):
    concept: str
    count: int = Field(8, ge=1)
    seed: int = 1


class ConceptFile(_Section):
    name: str
    category: Literal["identity", "object", "style"] = "identity"
    prompt: Optional[str] = None
    inverted_embeddings: Optional[str] = None
    templates: Optional[List[str]] = None
    reference_images: Optional[List[str]] = None
    renders: Optional[RenderSource] = None

    @model_validator(mode="after")
    def _sources(self):
        if (self.prompt is None) == (self.inverted_embeddings is None):
            raise ValueError("give exactly one of prompt and inverted_embeddings")
        if (self.reference_images is None) == (self.renders is None):
            raise ValueError("give exactly one of reference_images and renders")
        if self.templates is not None and any("{}" not in t for t in self.templates):
            raise ValueError("every template needs a '{}' slot")
        return self


def load_concept_spec(path: PathLike) -> ConceptSpec:
    """Build a ConceptSpec from a concept file; relative paths resolve against its directory"""
    path = Path(path)
    text, data = _load_json(path)
    try:
        spec = ConceptFile.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(format_validation_error(exc, text, str(path))) from exc
    base = path.parent
    templates = spec.templates
    if spec.renders is not None:
        bench_concept = get_concept(spec.renders.concept)
        images = renders(bench_concept, spec.renders.count, spec.renders.seed)
        templates = templates or list(bench_concept.templates)
    else:
        images = [load_ppm(base / p) for p in spec.reference_images]
    embeddings = None
    if spec.inverted_embeddings is not None:
        embeddings = load_embeddings(base / spec.inverted_embeddings)
    try:
        return ConceptSpec(
            name=spec.name,
            category=Category(spec.category),
            prompt_tokens=tuple(spec.prompt.split()) if spec.prompt is not None else None,
            inverted_embeddings=embeddings,
            reference_images=images,
            templates=templates or ["a photo of {}"],
        )
    except ResteerError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
