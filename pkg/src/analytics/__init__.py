"""
Forgetting metrics and charts

This module measures what a forgetting run did: the Memorization Score
(cosine between a concept's reference-prompt embedding and the embedding of
tokens inverted from anchor images), integrity drift of control concepts,
cross-attention mass on concept tokens and probe accuracy of samples. Charts
are written with matplotlib's non-interactive backend.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from ..bench import ProbeClassifier
from ..denoiser import Denoiser, position_mask
from ..diffusion import NoiseSchedule, p_sample, q_sample
from ..errors import ConceptError, DivergenceError, MetricError
from ..inversion import invert_for_score
from ..models import (ConceptSpec, ControlDrift, IntegrityReport, InversionConfig, MemorizationReport,
                      MetricsConfig, SamplerConfig, TrainLog)
from ..tensor import Tensor, no_grad, randn, rng_stream
from ..text import target_positions, tokenize_batch

logger = logging.getLogger(__name__)


def _run_ordered(jobs: Sequence[Callable[[], object]], threads: int = 1) -> List[object]:
    """Run independent jobs, results in submission order"""
    if threads <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: job(), jobs))


def memorization_score(emb_r: np.ndarray, emb_x: np.ndarray) -> float:
    """Cosine similarity of two pooled embeddings"""
    a = np.asarray(emb_r, dtype=np.float64).reshape(-1)
    b = np.asarray(emb_x, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise MetricError(f"embedding dimensions differ: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise MetricError("memorization score is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def memorization_delta(model_o: Denoiser, model_f: Denoiser, concept: ConceptSpec, cfg: InversionConfig,
                       sched: NoiseSchedule, runs: int = 5, anchor_images: int = 8,
                       reference_prompt: Optional[str] = None, threads: int = 1) -> MemorizationReport:
    """Memorization Score of ``concept`` on the original and the forgetting model.

    The reference embedding comes from the original model's text encoder.
    Run ``r`` inverts the same anchor images against both models with seed
    ``cfg.seed + r``. A run whose inversion diverges is excluded and named in
    the report.
    """
    if model_o.vocab != model_f.vocab or model_o.cfg != model_f.cfg:
        raise MetricError("models do not share vocabulary and configuration")
    if reference_prompt is None:
        if not concept.prompt_tokens:
            raise ConceptError(f"concept {concept.name!r} has no prompt words; pass a reference prompt")
        reference_prompt = concept.slot_text(inverted=False)
    anchors = list(concept.reference_images[:anchor_images])
    template = concept.templates[0]
    with no_grad():
        emb_r = model_o.encode_prompts(reference_prompt).pooled.numpy()

    def job(model: Denoiser, run: int):
        def call():
            run_cfg = replace(cfg, seed=cfg.seed + run)
            try:
                return memorization_score(emb_r, invert_for_score(model, anchors, reference_prompt,
                                                                  run_cfg, sched, template))
            except DivergenceError as exc:
                return exc
        return call

    jobs = [job(model, r) for r in range(runs) for model in (model_o, model_f)]
    results = _run_ordered(jobs, threads)
    initial, forgetting, excluded = [], [], []
    for k, value in enumerate(results):
        run, side = divmod(k, 2)
        if isinstance(value, Exception):
            note = f"run {run} ({'original' if side == 0 else 'forgetting'}): {value}"
            logger.warning("excluding inversion %s", note)
            excluded.append(note)
        elif side == 0:
            initial.append(value)
        else:
            forgetting.append(value)
    report = MemorizationReport(concept.name, initial, forgetting, excluded)
    logger.info("memorization %s: %.4f -> %.4f (band %.4f)", concept.name,
                report.initial_score, report.forgetting_score, report.noise_band)
    return report


def sample_images(model: Denoiser, prompt: str, count: int, sched: NoiseSchedule, cfg: SamplerConfig,
                  extra: Optional[np.ndarray] = None) -> np.ndarray:
    """``count`` samples of one prompt, shape (count, H, W, C)"""
    with no_grad():
        ctx = model.encode_prompts([prompt] * count, extra)
        images, _ = p_sample(model, ctx, sched, cfg)
    return images.numpy()


def probe_accuracy(model: Denoiser, prompt: str, label: str, count: int, sched: NoiseSchedule,
                   cfg: SamplerConfig, probe: Optional[ProbeClassifier] = None,
                   extra: Optional[np.ndarray] = None) -> float:
    probe = probe or ProbeClassifier()
    return probe.accuracy(sample_images(model, prompt, count, sched, cfg, extra), label)


def attention_mass(model: Denoiser, concept: ConceptSpec, sched: NoiseSchedule,
                   timesteps: Sequence[int], seed: int = 0, count: int = 8) -> float:
    """Mean cross-attention mass on the concept's tokens.

    Measured on fixed noised copies of the concept's reference images at the
    given timesteps, prompted with each of the concept's templates.
    """
    images = np.stack(concept.reference_images[:count])
    ids = tokenize_batch(concept.prompts(), model.vocab, model.cfg.max_len)
    extra = concept.inverted_embeddings
    rng = rng_stream(seed, "metrics")
    masses = []
    with no_grad():
        for t in timesteps:
            eps = randn(images.shape, rng)
            x_t = q_sample(Tensor(images), t, eps, sched)
            for row in ids:
                positions = target_positions(row, concept, model.vocab)
                ctx = model.encode_ids(np.repeat(row[None], len(images), axis=0),
                                       None if extra is None else Tensor(extra))
                _, record = model.forward(x_t, np.full(len(images), t), ctx, record=True)
                masses.append(record.mass(position_mask(positions, len(images), model.cfg.max_len)))
    return float(np.mean(masses))


def attention_ratio(mass_o: float, mass_f: float, concept: str = "control") -> float:
    """``mass_f / mass_o``; 1.0 when both are zero"""
    if mass_o == 0.0:
        if mass_f == 0.0:
            return 1.0
        raise MetricError(f"attention ratio of {concept!r} is undefined: original mass is zero")
    return mass_f / mass_o


def _control_drift(model_o: Denoiser, model_f: Denoiser, control: ConceptSpec, sched: NoiseSchedule,
                   metrics: MetricsConfig, seeds: Sequence[int], probe: ProbeClassifier) -> ControlDrift:
    prompt = control.prompts()[0]
    extra = control.inverted_embeddings
    before, after, dists = [], [], []
    for seed in seeds:
        sampler = SamplerConfig(steps=metrics.sample_steps, seed=seed)
        a = sample_images(model_o, prompt, metrics.samples_per_concept, sched, sampler, extra)
        b = sample_images(model_f, prompt, metrics.samples_per_concept, sched, sampler, extra)
        before.extend(a)
        after.extend(b)
        dists.extend(np.sqrt(np.sum((a - b) ** 2, axis=(1, 2, 3))))
    mass_o = attention_mass(model_o, control, sched, metrics.probe_timesteps, count=metrics.anchor_images)
    mass_f = attention_mass(model_f, control, sched, metrics.probe_timesteps, count=metrics.anchor_images)
    ratio = attention_ratio(mass_o, mass_f, control.name)
    return ControlDrift(
        concept=control.name,
        accuracy_before=probe.accuracy(before, control.name),
        accuracy_after=probe.accuracy(after, control.name),
        l2_drift=float(np.mean(dists)),
        attention_ratio=ratio,
    )


def integrity_drift(model_o: Denoiser, model_f: Denoiser, controls: Sequence[ConceptSpec], sched: NoiseSchedule,
                    metrics: MetricsConfig, seeds: Optional[Sequence[int]] = None,
                    probe: Optional[ProbeClassifier] = None, threads: int = 1) -> IntegrityReport:
    """Fixed-seed drift, probe accuracy and attention ratio of every control concept"""
    probe = probe or ProbeClassifier()
    seeds = list(range(metrics.drift_seeds)) if seeds is None else list(seeds)
    jobs = [lambda c=c: _control_drift(model_o, model_f, c, sched, metrics, seeds, probe) for c in controls]
    report = IntegrityReport(controls=_run_ordered(jobs, threads))
    for c in report.controls:
        logger.info("control %s: drift %.4f, accuracy %.2f -> %.2f, attention ratio %.3f",
                    c.concept, c.l2_drift, c.accuracy_before, c.accuracy_after, c.attention_ratio)
    return report


class ForgettingAnalyzer:
    """Measures forgetting runs with one schedule, protocol and probe"""

    def __init__(self, sched: NoiseSchedule, metrics: MetricsConfig, inversion: InversionConfig,
                 probe: Optional[ProbeClassifier] = None, threads: int = 1):
        self.sched = sched
        self.metrics = metrics
        self.inversion = inversion
        self.probe = probe or ProbeClassifier()
        self.threads = threads

    def sampler(self, seed: int = 0) -> SamplerConfig:
        return SamplerConfig(steps=self.metrics.sample_steps, seed=seed)

    def accuracy(self, model: Denoiser, prompt: str, label: str, seed: int = 0,
                 extra: Optional[np.ndarray] = None) -> float:
        return probe_accuracy(model, prompt, label, self.metrics.samples_per_concept, self.sched,
                              self.sampler(seed), self.probe, extra)

    def memorization(self, model_o: Denoiser, model_f: Denoiser, concept: ConceptSpec) -> MemorizationReport:
        return memorization_delta(model_o, model_f, concept, self.inversion, self.sched,
                                  runs=self.metrics.memorization_runs,
                                  anchor_images=self.metrics.anchor_images, threads=self.threads)

    def integrity(self, model_o: Denoiser, model_f: Denoiser, controls: Sequence[ConceptSpec],
                  seeds: Optional[Sequence[int]] = None) -> IntegrityReport:
        return integrity_drift(model_o, model_f, controls, self.sched, self.metrics, seeds,
                               self.probe, self.threads)

    def mass(self, model: Denoiser, concept: ConceptSpec) -> float:
        return attention_mass(model, concept, self.sched, self.metrics.probe_timesteps,
                              count=self.metrics.anchor_images)


class VisualizationHelper:
    """Helper class for writing report charts"""

    @staticmethod
    def create_line_chart(series: Dict[str, Sequence[float]], title: str, xlabel: str, ylabel: str,
                          save_path: str, x: Optional[Sequence[float]] = None):
        """Line chart with one line per series"""
        plt.figure(figsize=(10, 6))
        for label, values in series.items():
            xs = list(x) if x is not None else list(range(1, len(values) + 1))
            plt.plot(xs[:len(values)], list(values), marker="o", linewidth=2, markersize=3, label=label)
        plt.title(title, fontsize=16, fontweight="bold")
        plt.xlabel(xlabel, fontsize=12)
        plt.ylabel(ylabel, fontsize=12)
        plt.grid(True, alpha=0.3)
        if len(series) > 1:
            plt.legend()
        plt.tight_layout()
        plt.savefig(save_path, dpi=150, bbox_inches="tight")
        plt.close()
        return save_path

    @staticmethod
    def create_bar_chart(data: Dict[str, Tuple[float, ...]], title: str, xlabel: str, ylabel: str,
                         save_path: str, legend: Sequence[str] = ()):
        """Grouped bar chart; each category maps to one value per group"""
        plt.figure(figsize=(10, 6))
        categories = list(data.keys())
        groups = max((len(v) for v in data.values()), default=0)
        width = 0.8 / max(groups, 1)
        for g in range(groups):
            xs = [i + g * width for i in range(len(categories))]
            label = legend[g] if g < len(legend) else None
            plt.bar(xs, [data[c][g] for c in categories], width=width, label=label)
        plt.xticks([i + 0.4 - width / 2 for i in range(len(categories))], categories, rotation=45)
        plt.title(title, fontsize=16, fontweight="bold")
        plt.xlabel(xlabel, fontsize=12)
        plt.ylabel(ylabel, fontsize=12)
        plt.grid(True, alpha=0.3)
        if legend:
            plt.legend()
        plt.tight_layout()
        plt.savefig(save_path, dpi=150, bbox_inches="tight")
        plt.close()
        return save_path

    @classmethod
    def plot_train_log(cls, log: TrainLog, title: str, save_path: str):
        series = {"loss": log.losses}
        if log.target_mass:
            series["target attention mass"] = log.target_mass
        return cls.create_line_chart(series, title, "step", "value", save_path)

    @classmethod
    def plot_memorization(cls, reports: Sequence[Dict[str, Any]], save_path: str):
        """Bar pairs from MemorizationReport.to_dict() entries"""
        data = {r["concept"]: (r["initial_score"], r["forgetting_score"]) for r in reports}
        return cls.create_bar_chart(data, "Memorization Score", "concept", "cosine", save_path,
                                    legend=("original", "forgetting"))
