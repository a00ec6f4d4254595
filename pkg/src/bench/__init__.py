"""
ConceptBench-mini: procedural concepts, the probe classifier and base training

Eight concepts in three categories are drawn procedurally on 16x16 RGB
canvases. Identity concepts fix one shape and one color, object concepts fix
the shape and vary the color, and style concepts fix a texture and palette
and vary the shape. Every render is a pure function of its seed; jitter moves
the shape by up to one pixel, scales it by up to 8% and shades the
background.

The probe classifier judges which concept an image shows by template
matching against zero-jitter renders. It never looks at a learned model.
"""

import logging
import time
from dataclasses import dataclass, field
from itertools import product
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from ..denoiser import Denoiser, init_model, select_params
from ..diffusion import NoiseSchedule, ddpm_loss
from ..errors import ConceptError, DivergenceError, NonFiniteError
from ..models import Category, ConceptSpec, DenoiserConfig, ParamScope, TrainConfig, TrainLog
from ..tensor import Adam, Graph, Tensor, backward, rng_stream
from ..text import Vocabulary, tokenize_batch

logger = logging.getLogger(__name__)

IMAGE_SIZE = 16
BACKGROUND = -0.8
BACKGROUND_JITTER = 0.1
SCALE_JITTER = 0.08
SHIFT_JITTER = 1
RADIUS = 5.0
FOREGROUND_THRESHOLD = 0.3
NO_CONCEPT_THRESHOLD = 0.25
RENDER_STRIDE = 100_000

Color = Tuple[float, float, float]

COLORS: Dict[str, Color] = {
    "red": (0.9, -0.7, -0.7),
    "blue": (-0.7, -0.5, 0.9),
    "yellow": (0.9, 0.8, -0.7),
    "green": (-0.6, 0.8, -0.6),
    "cyan": (-0.7, 0.8, 0.9),
    "pink": (0.9, -0.1, 0.6),
    "white": (0.9, 0.9, 0.9),
    "purple": (0.2, -0.7, 0.7),
    "orange": (0.9, 0.2, -0.8),
    "teal": (-0.8, 0.3, 0.3),
    "gray": (0.0, 0.0, 0.0),
}

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond")
TEXTURES = ("solid", "stripes", "checker")

TEMPLATES: Dict[Category, Tuple[str, ...]] = {
    Category.IDENTITY: ("a photo of {}", "an image of {}", "a picture of {}"),
    Category.OBJECT: ("a photo of {}", "an image of {}", "a picture of {}"),
    Category.STYLE: ("art in {} style", "a painting in {} style"),
}


@dataclass(frozen=True)
class BenchConcept:
    """Renderer parameters of one procedural concept"""
    name: str
    category: Category
    shapes: Tuple[str, ...]
    palettes: Tuple[Tuple[str, ...], ...]
    texture: str = "solid"

    def __post_init__(self):
        if any(s not in SHAPES for s in self.shapes) or self.texture not in TEXTURES:
            raise ConceptError(f"{self.name}: unknown shape or texture")
        if any(c not in COLORS for palette in self.palettes for c in palette):
            raise ConceptError(f"{self.name}: unknown color")
        needed = 1 if self.texture == "solid" else 2
        if any(len(p) != needed for p in self.palettes):
            raise ConceptError(f"{self.name}: {self.texture} fill needs {needed} color(s) per palette")
        single_shape = len(self.shapes) == 1
        single_palette = len(self.palettes) == 1
        if self.category is Category.IDENTITY and not (single_shape and single_palette and self.texture == "solid"):
            raise ConceptError(f"identity concept {self.name} must fix one shape and one color")
        if self.category is Category.OBJECT and not single_shape:
            raise ConceptError(f"object concept {self.name} must fix its shape")
        if self.category is Category.STYLE and not (single_palette and self.texture != "solid"):
            raise ConceptError(f"style concept {self.name} must fix a texture and palette")

    @property
    def variants(self) -> List[Tuple[str, Tuple[str, ...]]]:
        return list(product(self.shapes, self.palettes))

    @property
    def templates(self) -> Tuple[str, ...]:
        return TEMPLATES[self.category]


def catalog() -> List[BenchConcept]:
    """The eight default concepts"""
    concepts = [
        BenchConcept("kiki", Category.IDENTITY, ("circle",), (("red",),)),
        BenchConcept("bobo", Category.IDENTITY, ("square",), (("blue",),)),
        BenchConcept("zuzu", Category.IDENTITY, ("triangle",), (("yellow",),)),
        BenchConcept("cross", Category.OBJECT, ("cross",), (("green",), ("cyan",), ("pink",))),
        BenchConcept("ring", Category.OBJECT, ("ring",), (("green",), ("cyan",), ("pink",))),
        BenchConcept("diamond", Category.OBJECT, ("diamond",), (("green",), ("cyan",), ("pink",))),
        BenchConcept("stripes", Category.STYLE, ("circle", "square", "triangle"), (("white", "purple"),), "stripes"),
        BenchConcept("checker", Category.STYLE, ("circle", "square", "triangle"), (("orange", "teal"),), "checker"),
    ]
    identities = [c.variants[0] for c in concepts if c.category is Category.IDENTITY]
    if len(set(identities)) != len(identities):
        raise ConceptError("identity concepts must have unique (shape, color)")
    return concepts


def get_concept(name: str, concepts: Optional[Sequence[BenchConcept]] = None) -> BenchConcept:
    for concept in concepts or catalog():
        if concept.name == name:
            return concept
    raise ConceptError(f"unknown benchmark concept {name!r}")


# Rendering

def shape_mask(shape: str, cx: float, cy: float, radius: float, size: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean (size, size) mask of a shape sampled at pixel centers"""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        return dx ** 2 + dy ** 2 <= radius ** 2
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * radius
    if shape == "triangle":
        return (dy >= -radius) & (dy <= 0.8 * radius) & (np.abs(dx) <= 0.55 * (dy + radius))
    if shape == "cross":
        arm = 0.3 * radius
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= radius))
    if shape == "ring":
        dist = np.sqrt(dx ** 2 + dy ** 2)
        return (dist >= 0.55 * radius) & (dist <= radius)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= radius
    raise ConceptError(f"unknown shape {shape!r}")


def fill_pattern(texture: str, palette: Sequence[str], size: int = IMAGE_SIZE) -> np.ndarray:
    """(size, size, 3) color field of a texture"""
    colors = np.array([COLORS[c] for c in palette])
    rows, cols = np.mgrid[0:size, 0:size]
    if texture == "solid":
        index = np.zeros((size, size), dtype=np.int64)
    elif texture == "stripes":
        index = (rows // 2) % 2
    else:
        index = ((rows // 2) + (cols // 2)) % 2
    return colors[index]


def draw(shape: str, texture: str, palette: Sequence[str], shift: Tuple[int, int] = (0, 0),
         scale: float = 1.0, background: float = BACKGROUND) -> np.ndarray:
    center = IMAGE_SIZE / 2
    mask = shape_mask(shape, center + shift[0], center + shift[1], RADIUS * scale)
    image = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), background)
    image[mask] = fill_pattern(texture, palette)[mask]
    return np.clip(image, -1.0, 1.0)


def render(concept: BenchConcept, seed: int, jitter: bool = True, variant: Optional[int] = None) -> np.ndarray:
    """One 16x16x3 image of a concept in [-1, 1], a pure function of the seed"""
    rng = rng_stream(seed, f"corpus.{concept.name}")
    variants = concept.variants
    index = int(rng.integers(0, len(variants))) if variant is None else variant
    shape, palette = variants[index]
    if not jitter:
        return draw(shape, concept.texture, palette)
    shift = tuple(int(v) for v in rng.integers(-SHIFT_JITTER, SHIFT_JITTER + 1, size=2))
    scale = float(rng.uniform(1.0 - SCALE_JITTER, 1.0 + SCALE_JITTER))
    background = BACKGROUND + float(rng.uniform(-BACKGROUND_JITTER, BACKGROUND_JITTER))
    return draw(shape, concept.texture, palette, shift, scale, background)


def renders(concept: BenchConcept, count: int, seed: int) -> List[np.ndarray]:
    """``count`` jittered renders; seed ``s`` covers render seeds s*RENDER_STRIDE + k"""
    return [render(concept, seed * RENDER_STRIDE + k) for k in range(count)]


def decoy_images(count: int, seed: int) -> List[np.ndarray]:
    """Gray shapes belonging to no concept"""
    rng = rng_stream(seed, "corpus.decoys")
    images = []
    for _ in range(count):
        shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
        shift = tuple(int(v) for v in rng.integers(-2, 3, size=2))
        scale = float(rng.uniform(0.7, 1.2))
        images.append(draw(shape, "solid", ("gray",), shift, scale))
    return images


def concept_spec(concept: BenchConcept, count: int = 8, seed: int = 1,
                 templates: Optional[Sequence[str]] = None) -> ConceptSpec:
    """ConceptSpec named by the concept's word, with rendered reference images"""
    return ConceptSpec(
        name=concept.name,
        category=concept.category,
        prompt_tokens=(concept.name,),
        reference_images=renders(concept, count, seed),
        templates=list(templates or concept.templates),
    )


# Probe classifier

def foreground(image: np.ndarray) -> np.ndarray:
    return np.max(np.abs(image - BACKGROUND), axis=-1) > FOREGROUND_THRESHOLD


def normalize_background(image: np.ndarray) -> np.ndarray:
    """Move the border median of each channel onto the canonical background"""
    border = np.concatenate([image[0], image[-1], image[1:-1, 0], image[1:-1, -1]])
    return image - np.median(border, axis=0) + BACKGROUND


class ProbeClassifier:
    """Nearest zero-jitter template by masked squared error"""

    def __init__(self, concepts: Optional[Sequence[BenchConcept]] = None, threshold: float = NO_CONCEPT_THRESHOLD):
        self.concepts = list(concepts or catalog())
        self.threshold = threshold
        labels, images = [], []
        for concept in self.concepts:
            for k in range(len(concept.variants)):
                labels.append(concept.name)
                images.append(render(concept, 0, jitter=False, variant=k))
        self.labels = labels
        self.names = [c.name for c in self.concepts]
        self.templates = np.stack(images)
        self.template_masks = np.stack([foreground(t) for t in images])
        self.shifts = [(dy, dx) for dy in range(-SHIFT_JITTER, SHIFT_JITTER + 1)
                       for dx in range(-SHIFT_JITTER, SHIFT_JITTER + 1)]

    def distances(self, image: np.ndarray) -> Dict[str, float]:
        """Best masked MSE per concept over its variants and the allowed shifts"""
        img = normalize_background(np.asarray(image, dtype=np.float64))
        shifted = np.stack([np.roll(img, s, axis=(0, 1)) for s in self.shifts])
        union = foreground(shifted)[:, None] | self.template_masks[None]
        sq = np.sum((shifted[:, None] - self.templates[None]) ** 2, axis=-1)
        counts = np.maximum(union.sum(axis=(2, 3)), 1)
        per_template = (np.sum(sq * union, axis=(2, 3)) / (3 * counts)).min(axis=0)
        best: Dict[str, float] = {}
        for label, d in zip(self.labels, per_template):
            best[label] = min(best.get(label, np.inf), float(d))
        return best

    def classify(self, image: np.ndarray) -> Tuple[str, float]:
        """(label, confidence); confidence is the relative margin to the runner-up"""
        ranked = sorted(self.distances(image).items(), key=lambda kv: (kv[1], kv[0]))
        (label, d1), (_, d2) = ranked[0], ranked[1]
        return label, (d2 - d1) / (d2 + 1e-12)

    def classify_batch(self, images: Sequence[np.ndarray]) -> List[Tuple[str, float]]:
        return [self.classify(img) for img in images]

    def accuracy(self, images: Sequence[np.ndarray], label: str) -> float:
        """Share of images classified as ``label`` with confidence at the threshold or above"""
        if len(images) == 0:
            return 0.0
        hits = sum(1 for name, conf in self.classify_batch(images) if name == label and conf >= self.threshold)
        return hits / len(images)


_DEFAULT_PROBE: Optional[ProbeClassifier] = None


def probe_classify(image: np.ndarray) -> Tuple[str, float]:
    """Classify with the default catalog"""
    global _DEFAULT_PROBE
    if _DEFAULT_PROBE is None:
        _DEFAULT_PROBE = ProbeClassifier()
    return _DEFAULT_PROBE.classify(image)


# Training corpus

@dataclass(frozen=True)
class DominanceSpec:
    """A shared prompt word paired with two concepts at a fixed ratio"""
    word: str = "fruit"
    major: str = "kiki"
    minor: str = "bobo"
    ratio: int = 9


@dataclass
class Corpus:
    images: np.ndarray
    prompts: List[str]
    labels: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.prompts)


def template_words(concepts: Sequence[BenchConcept]) -> List[str]:
    words: List[str] = []
    for concept in concepts:
        for template in concept.templates:
            words.extend(w for w in template.split() if w != "{}")
    return words


def build_vocabulary(concepts: Sequence[BenchConcept], dominance: Optional[DominanceSpec] = None,
                     placeholders: int = 4) -> Vocabulary:
    words = template_words(concepts) + [c.name for c in concepts]
    if dominance is not None:
        words.append(dominance.word)
    return Vocabulary.build(words, placeholders)


def build_corpus(concepts: Sequence[BenchConcept], per_concept: int, seed: int,
                 dominance: Optional[DominanceSpec] = None) -> Corpus:
    """Rendered (image, prompt) pairs; templates cycle over the renders"""
    images, prompts, labels = [], [], []
    for concept in concepts:
        for k, image in enumerate(renders(concept, per_concept, seed)):
            images.append(image)
            prompts.append(concept.templates[k % len(concept.templates)].format(concept.name))
            labels.append(concept.name)
    if dominance is not None:
        major = get_concept(dominance.major, concepts)
        minor = get_concept(dominance.minor, concepts)
        templates = TEMPLATES[Category.OBJECT]
        for k in range(per_concept):
            concept = minor if k % (dominance.ratio + 1) == dominance.ratio else major
            images.append(render(concept, (seed + 1) * RENDER_STRIDE - 1 - k))
            prompts.append(templates[k % len(templates)].format(dominance.word))
            labels.append(concept.name)
    return Corpus(images=np.stack(images), prompts=prompts, labels=labels)


def trainable_for_base(model: Denoiser) -> List[str]:
    """Every denoiser weight plus the token and position tables"""
    return list(select_params(model, ParamScope.FULL)) + ["text.token_embedding", "text.position_embedding"]


def train_base_model(concepts: Sequence[BenchConcept], denoiser_cfg: DenoiserConfig, sched: NoiseSchedule,
                     cfg: TrainConfig, dominance: Optional[DominanceSpec] = None,
                     vocab: Optional[Vocabulary] = None, progress: bool = False) -> Tuple[Denoiser, TrainLog]:
    """Train a denoiser from scratch on a ConceptBench-mini corpus with Adam"""
    vocab = vocab or build_vocabulary(concepts, dominance)
    corpus = build_corpus(concepts, cfg.renders_per_concept, cfg.seed, dominance)
    model = init_model(denoiser_cfg, vocab, cfg.seed)
    names = trainable_for_base(model)
    model.set_trainable(names)
    ids = tokenize_batch(corpus.prompts, vocab, denoiser_cfg.max_len)
    rng = rng_stream(cfg.seed, "train")
    optimizer = Adam(cfg.lr)
    log = TrainLog()

    logger.info("training base model on %d pairs for %d steps", len(corpus), cfg.steps)
    for step in tqdm(range(cfg.steps), desc="train", disable=not progress):
        started = time.perf_counter()
        pick = rng.integers(0, len(corpus), size=cfg.batch)
        try:
            with Graph() as graph:
                ctx = model.encode_ids(ids[pick])
                loss = ddpm_loss(model, Tensor(corpus.images[pick]), ctx, sched, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"training loss became {value} at step {step}")
            backward(graph, loss, [model.params[n] for n in names])
            optimizer.step(model.params, names)
        except NonFiniteError as exc:
            raise DivergenceError(f"training diverged at step {step}: {exc}") from exc
        log.append(value, time.perf_counter() - started)
        if step % 250 == 0:
            logger.debug("train step %d loss %.5f", step, value)
    model.freeze()
    if log.losses:
        logger.info("training finished: loss %.4f -> %.4f in %.1fs", log.losses[0], log.losses[-1], log.wall_clock)
    return model, log
