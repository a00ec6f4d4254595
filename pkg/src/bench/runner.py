"""
Benchmark runner

Runs one configured benchmark end to end: obtain a base model (train it or
load a checkpoint), forget the targets with the configured method and any
comparison methods, measure memorization and integrity, run the optional
scenarios, and write JSON and CSV reports, sample grids, charts and patches
under the output directory. Training and forgetting phases run one after
another; measurement jobs may use a thread pool. Every CSV is a pure
function of the configuration and its seeds.
"""

import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import (TEMPLATES, ProbeClassifier, build_vocabulary, concept_spec, decoy_images, get_concept, renders,
               train_base_model)
from ..analytics import ForgettingAnalyzer, VisualizationHelper, sample_images
from ..config import RunConfig
from ..denoiser import Denoiser
from ..diffusion import NoiseSchedule, schedule_from_config
from ..errors import ConfigError
from ..forgetting import baseline_blacklist, baseline_naive_finetune, forget, make_patch
from ..inversion import fill_templates, invert
from ..models import Category, ConceptSpec, ForgetConfig, ModelPatch, ParamScope, SamplerConfig, TrainLog
from ..storage import ArtifactStore, load_checkpoint

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


class MethodResult:
    """A forgetting model produced by one method, with its patch and log"""

    def __init__(self, method: str, model: Denoiser, patch: Optional[ModelPatch] = None,
                 log: Optional[TrainLog] = None, seconds: float = 0.0):
        self.method = method
        self.model = model
        self.patch = patch
        self.log = log
        self.seconds = seconds


class BenchmarkRunner:
    """Executes a RunConfig against an ArtifactStore"""

    def __init__(self, cfg: RunConfig, store: ArtifactStore, threads: int = 1, progress: bool = False,
                 base_dir: Optional[Path] = None):
        self.cfg = cfg
        self.store = store
        self.threads = threads
        self.progress = progress
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        self.libs = cfg.to_dataclasses()
        self.sched: NoiseSchedule = schedule_from_config(self.libs["schedule"])
        self.bench = cfg.benchmark
        self.concepts = [get_concept(n) for n in self.bench.concepts]
        self.probe = ProbeClassifier(self.concepts)
        self.analyzer = ForgettingAnalyzer(self.sched, self.libs["metrics"], self.libs["inversion"],
                                           self.probe, threads)
        self.targets = [self._spec(n) for n in self.bench.targets]
        self.controls = [self._spec(n) for n in self.bench.control_names()]
        self.charts = VisualizationHelper()

    def _spec(self, name: str) -> ConceptSpec:
        return concept_spec(get_concept(name, self.concepts), self.bench.reference_images, self.bench.reference_seed)

    def _chart_path(self, name: str) -> str:
        path = self.store.path_for(Path("charts") / name)
        self.store.ensure_directory_exists(path.parent)
        return str(path)

    # Base model

    def base_model(self) -> Tuple[Denoiser, Optional[TrainLog]]:
        dominance = self.bench.dominance_spec()
        if self.bench.base_checkpoint is not None:
            path = Path(self.bench.base_checkpoint)
            model = load_checkpoint(path if path.is_absolute() else self.base_dir / path)
            needed = build_vocabulary(self.concepts, dominance)
            missing = [w for w in needed.tokens if w not in model.vocab]
            if missing:
                raise ConfigError(f"base checkpoint vocabulary lacks {missing[:5]}")
            if model.cfg != self.libs["denoiser"]:
                raise ConfigError("base checkpoint denoiser shape differs from the denoiser section")
            logger.info("loaded base model %s", path)
            return model, None
        model, log = train_base_model(self.concepts, self.libs["denoiser"], self.sched, self.libs["train"],
                                      dominance, progress=self.progress)
        self.store.save_checkpoint("base.rstr", model)
        self.store.write_csv("train_log.csv", ["step", "loss"], ((k, v) for k, v in enumerate(log.losses)))
        if log.losses:
            self.charts.plot_train_log(log, "Base model training loss", self._chart_path("train_loss.png"))
        return model, log

    # Methods

    def forget_config(self, concepts: List[ConceptSpec], **overrides) -> ForgetConfig:
        data = self.cfg.forget.model_dump()
        if data["weights"] is not None and len(data["weights"]) != len(concepts):
            data["weights"] = None
        data.update(overrides)
        return ForgetConfig(concepts=concepts, seed=self.cfg.seed, **data)

    def apply_method(self, method: str, base: Denoiser) -> MethodResult:
        started = time.perf_counter()
        if method == "fmn":
            model, patch, log = forget(base, self.forget_config(self.targets), self.sched, progress=self.progress)
            return MethodResult(method, model, patch, log, time.perf_counter() - started)
        if method == "blacklist":
            model = base
            for target in self.targets:
                model = baseline_blacklist(model, target)
            return MethodResult(method, model, seconds=time.perf_counter() - started)
        if method == "naive":
            naive_cfg = self.libs["naive"]
            decoys = decoy_images(self.cfg.naive.decoys, self.cfg.seed)
            model, log = base, TrainLog()
            for target in self.targets:
                model = baseline_naive_finetune(model, target, decoys, naive_cfg, self.sched, log, self.progress)
            patch = make_patch(base.state_dict(), model.state_dict(), ParamScope.FULL,
                               {"concepts": [t.name for t in self.targets], "method": "naive",
                                "steps": naive_cfg.steps, "lr": naive_cfg.lr})
            return MethodResult(method, model, patch, log, time.perf_counter() - started)
        raise ConfigError(f"unknown method {method!r}")

    def grids(self, tag: str, model: Denoiser, specs: Sequence[ConceptSpec]) -> List[str]:
        written = []
        sampler = SamplerConfig(steps=self.libs["metrics"].sample_steps, seed=self.cfg.seed)
        for spec in specs:
            images = sample_images(model, spec.prompts()[0], self.bench.grid_samples, self.sched, sampler)
            written.append(str(self.store.save_mosaic(Path("grids") / f"{tag}_{spec.name}.ppm", images)))
        return written

    def measure(self, base: Denoiser, result: MethodResult) -> Dict[str, Any]:
        """Target effect, memorization and integrity of one method's model"""
        targets = []
        for spec in self.targets:
            prompt = spec.prompts()[0]
            memo = self.analyzer.memorization(base, result.model, spec)
            targets.append({
                "concept": spec.name,
                "accuracy_before": self.analyzer.accuracy(base, prompt, spec.name, self.cfg.seed),
                "accuracy_after": self.analyzer.accuracy(result.model, prompt, spec.name, self.cfg.seed),
                "mass_before": self.analyzer.mass(base, spec),
                "mass_after": self.analyzer.mass(result.model, spec),
                "memorization": memo.to_dict(),
            })
        integrity = self.analyzer.integrity(base, result.model, self.controls,
                                            seeds=[self.cfg.seed + k for k in range(self.libs["metrics"].drift_seeds)])
        entry: Dict[str, Any] = {
            "method": result.method,
            "targets": targets,
            "integrity": integrity.to_dict(),
            "seconds": result.seconds,
            "patch": None,
        }
        if result.patch is not None:
            path = self.store.save_patch(Path("patches") / f"{result.method}.rpch", result.patch)
            entry["patch"] = path.name
            entry["patch_parameters"] = result.patch.num_parameters()
        if result.log is not None and result.log.losses:
            self.store.write_csv(f"{result.method}_log.csv", ["step", "loss", "target_mass"],
                                 ((k, loss, result.log.target_mass[k] if k < len(result.log.target_mass) else "")
                                  for k, loss in enumerate(result.log.losses)))
            self.charts.plot_train_log(result.log, f"{result.method} optimization",
                                       self._chart_path(f"{result.method}_log.png"))
        entry["grids"] = [Path(p).name for p in self.grids(result.method, result.model, self.targets + self.controls)]
        logger.info("measured method %s", result.method)
        return entry

    # Scenarios

    def _drift(self, base_samples: Dict[str, np.ndarray], model: Denoiser, controls: Sequence[ConceptSpec],
               count: int) -> float:
        sampler = SamplerConfig(steps=self.libs["metrics"].sample_steps, seed=self.cfg.seed)
        dists = []
        for spec in controls:
            after = sample_images(model, spec.prompts()[0], count, self.sched, sampler)
            dists.extend(np.sqrt(np.sum((base_samples[spec.name] - after) ** 2, axis=(1, 2, 3))))
        return float(np.mean(dists))

    def ablation(self, base: Denoiser) -> List[Dict[str, Any]]:
        """Control drift along CA_ONLY and FULL forgetting runs at the same lr"""
        section = self.bench.ablation
        sampler = SamplerConfig(steps=self.libs["metrics"].sample_steps, seed=self.cfg.seed)
        rows = []
        for name in section.concepts:
            spec = self._spec(name)
            controls = [self._spec(n) for n in self.bench.concepts if n != name]
            base_samples = {c.name: sample_images(base, c.prompts()[0], section.samples, self.sched, sampler)
                            for c in controls}
            curves: Dict[str, List[float]] = {}
            steps_axis: List[int] = []
            for scope in (ParamScope.CA_ONLY, ParamScope.FULL):
                curve: List[Tuple[int, float]] = []

                def on_step(step: int, model: Denoiser, curve=curve):
                    if step % section.eval_every == 0:
                        curve.append((step, self._drift(base_samples, model, controls, section.samples)))

                overrides = {"scope": scope, "steps": section.steps}
                if section.lr is not None:
                    overrides["lr"] = section.lr
                forget(base, self.forget_config([spec], **overrides), self.sched, on_step=on_step)
                crossed = next((s for s, d in curve if d > section.drift_threshold), None)
                rows.append({"concept": name, "scope": scope.value, "curve": curve, "first_crossing": crossed})
                curves[scope.value] = [d for _, d in curve]
                steps_axis = [s for s, _ in curve]
                logger.info("ablation %s %s: drift threshold crossed at %s", name, scope.value, crossed)
            self.charts.create_line_chart(curves, f"Control drift while forgetting {name}", "step",
                                          "mean L2 drift", self._chart_path(f"ablation_{name}.png"), x=steps_axis)
        return rows

    def recoverability(self, base: Denoiser, fmn_model: Optional[Denoiser]) -> List[Dict[str, Any]]:
        """Probe accuracy of samples summoned by inverted tokens on each model"""
        inv_cfg = self.libs["inversion"]
        if fmn_model is None:
            fmn_model, _, _ = forget(base, self.forget_config(self.targets), self.sched, progress=self.progress)
        rows = []
        for spec in self.targets:
            blacklisted = baseline_blacklist(base, spec)
            entry = {"concept": spec.name}
            for label, model in (("base", base), ("blacklist", blacklisted), ("fmn", fmn_model)):
                result = invert(model, spec.reference_images, spec.templates, inv_cfg, self.sched,
                                progress=self.progress)
                prompt = fill_templates(spec.templates[0], inv_cfg.n_tokens)[0]
                entry[label] = self.analyzer.accuracy(model, prompt, spec.name, self.cfg.seed, result.embeddings)
            logger.info("recoverability %s: %s", spec.name, entry)
            rows.append(entry)
        return rows

    def correction(self, base: Denoiser) -> List[Dict[str, Any]]:
        """Share of the minor concept among samples of the dominated word, before and after"""
        dominance = self.bench.dominance_spec()
        major = get_concept(dominance.major, self.concepts)
        templates = list(TEMPLATES[Category.OBJECT])
        word_spec = ConceptSpec(name=dominance.word, category=Category.OBJECT, prompt_tokens=(dominance.word,),
                                reference_images=renders(major, self.bench.reference_images, self.bench.reference_seed),
                                templates=templates)
        forgotten, _, _ = forget(base, self.forget_config([word_spec]), self.sched, progress=self.progress)
        prompt = templates[0].format(dominance.word)
        metrics = self.libs["metrics"]
        rows = []
        for k in range(metrics.drift_seeds):
            seed = self.cfg.seed + k
            sampler = SamplerConfig(steps=metrics.sample_steps, seed=seed)
            row = {"seed": seed}
            for label, model in (("before", base), ("after", forgotten)):
                images = sample_images(model, prompt, metrics.samples_per_concept, self.sched, sampler)
                row[f"minor_share_{label}"] = self.probe.accuracy(images, dominance.minor)
                row[f"major_share_{label}"] = self.probe.accuracy(images, dominance.major)
            rows.append(row)
        return rows

    # Reports

    def write_reports(self, methods: List[Dict[str, Any]], scenarios: Dict[str, Any]) -> None:
        self.store.write_csv(
            "targets.csv", ["method", "concept", "accuracy_before", "accuracy_after", "mass_before", "mass_after"],
            [(m["method"], t["concept"], t["accuracy_before"], t["accuracy_after"], t["mass_before"], t["mass_after"])
             for m in methods for t in m["targets"]])
        self.store.write_csv(
            "memorization.csv", ["method", "concept", "initial_score", "forgetting_score", "delta", "noise_band", "runs"],
            [(m["method"], t["concept"], t["memorization"]["initial_score"], t["memorization"]["forgetting_score"],
              t["memorization"]["delta"], t["memorization"]["noise_band"], t["memorization"]["runs"])
             for m in methods for t in m["targets"]])
        self.store.write_csv(
            "integrity.csv", ["method", "control", "accuracy_before", "accuracy_after", "l2_drift", "attention_ratio"],
            [(m["method"], c["concept"], c["accuracy_before"], c["accuracy_after"], c["l2_drift"], c["attention_ratio"])
             for m in methods for c in m["integrity"]["controls"]])
        if "ablation" in scenarios:
            self.store.write_csv("ablation.csv", ["concept", "scope", "step", "drift"],
                                 [(r["concept"], r["scope"], s, d) for r in scenarios["ablation"] for s, d in r["curve"]])
        if "recoverability" in scenarios:
            self.store.write_csv("recoverability.csv", ["concept", "base", "blacklist", "fmn"],
                                 [(r["concept"], r["base"], r["blacklist"], r["fmn"]) for r in scenarios["recoverability"]])
        if "correction" in scenarios:
            keys = ["seed", "minor_share_before", "minor_share_after", "major_share_before", "major_share_after"]
            self.store.write_csv("correction.csv", keys, [[r[k] for k in keys] for r in scenarios["correction"]])

    def run(self) -> Dict[str, Any]:
        started = time.perf_counter()
        self.store.ensure_directory_exists()
        base, _ = self.base_model()
        self.grids("base", base, self.targets + self.controls)

        methods, fmn_model = [], None
        for method in dict.fromkeys([self.bench.method] + list(self.bench.compare)):
            result = self.apply_method(method, base)
            if method == "fmn":
                fmn_model = result.model
            methods.append(self.measure(base, result))

        scenarios: Dict[str, Any] = {}
        if "ablation" in self.bench.scenarios:
            scenarios["ablation"] = self.ablation(base)
        if "recoverability" in self.bench.scenarios:
            scenarios["recoverability"] = self.recoverability(base, fmn_model)
        if "correction" in self.bench.scenarios:
            scenarios["correction"] = self.correction(base)

        memo_reports = [t["memorization"] for m in methods if m["method"] == self.bench.method for t in m["targets"]]
        self.charts.plot_memorization(memo_reports, self._chart_path("memorization.png"))
        self.write_reports(methods, scenarios)
        report = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "config": self.cfg.model_dump(mode="json"),
            "methods": methods,
            "scenarios": scenarios,
            "seconds": time.perf_counter() - started,
        }
        self.store.write_json("report.json", report)
        logger.info("benchmark finished in %.1fs", report["seconds"])
        return report


def run_benchmark(cfg: RunConfig, store: ArtifactStore, threads: int = 1, progress: bool = False,
                  base_dir: Optional[Path] = None) -> Dict[str, Any]:
    """Run a benchmark configuration and write its report directory"""
    return BenchmarkRunner(cfg, store, threads, progress, base_dir).run()
