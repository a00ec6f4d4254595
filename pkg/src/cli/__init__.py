"""
Command Line Interface for resteer

This module provides the ``resteer`` command group: base-model training,
sampling, forgetting, concept inversion, the memorization and integrity
metrics, patch tools, the benchmark runner and the self checks. Library
errors are reported on stderr and mapped to their documented exit codes.
"""

import logging
from collections import Counter
from pathlib import Path
from typing import Optional

import click

from ..analytics import ForgettingAnalyzer, VisualizationHelper, memorization_delta, sample_images
from ..bench import ProbeClassifier, concept_spec, get_concept, train_base_model
from ..bench.runner import run_benchmark
from ..config import RunConfig, load_concept_spec, load_run_config
from ..diffusion import schedule_from_config
from ..errors import ResteerError
from ..forgetting import apply_patch, forget, make_patch
from ..inversion import invert
from ..models import ForgetConfig, InversionConfig, ParamScope, SamplerConfig, as_names
from ..selftest import run_selftest
from ..storage import ArtifactStore, load_checkpoint, load_embeddings, load_patch

logger = logging.getLogger(__name__)

EXISTING_FILE = click.Path(exists=True, dir_okay=False, path_type=Path)


class ResteerGroup(click.Group):
    """Click group that turns library errors into their exit codes"""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except ResteerError as exc:
            click.echo(f"❌ {type(exc).__name__}: {exc}", err=True)
            ctx.exit(exc.exit_code)


def _setup_logging(verbose: int) -> None:
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _run_config(ctx, config: Optional[Path]) -> RunConfig:
    """Run configuration from ``--config`` or the defaults, with the global seed applied"""
    cfg = load_run_config(config) if config is not None else RunConfig()
    if ctx.obj["seed"] is not None:
        cfg = cfg.with_seed(ctx.obj["seed"])
    return cfg


def _seed(ctx, cfg: RunConfig) -> int:
    return cfg.seed if ctx.obj["seed"] is None else ctx.obj["seed"]


@click.group(cls=ResteerGroup)
@click.option("--seed", type=int, default=None, help="Global seed (overrides the config seed)")
@click.option("--out", "out", type=click.Path(file_okay=False, path_type=Path), default=Path("out"),
              show_default=True, help="Output directory; nothing is written outside it")
@click.option("--threads", type=click.IntRange(1, 64), default=1, show_default=True,
              help="Worker threads for measurement jobs")
@click.option("-v", "--verbose", count=True, help="-v for INFO, -vv for DEBUG logging")
@click.pass_context
def cli(ctx, seed, out, threads, verbose):
    """resteer - forget concepts in a small text-to-image diffusion model"""
    _setup_logging(verbose)
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed
    ctx.obj["threads"] = threads
    ctx.obj["progress"] = verbose > 0
    ctx.obj["store"] = ArtifactStore(out)


@cli.command()
@click.option("--config", type=EXISTING_FILE, default=None, help="Run configuration JSON")
@click.option("--steps", type=click.IntRange(0), default=None, help="Override train.steps")
@click.pass_context
def train(ctx, config, steps):
    """Train a base model on ConceptBench-mini"""
    cfg = _run_config(ctx, config)
    libs = cfg.to_dataclasses()
    train_cfg = libs["train"]
    if steps is not None:
        train_cfg = cfg.train.model_copy(update={"steps": steps}).to_dataclass(cfg.seed)
    concepts = [get_concept(n) for n in cfg.benchmark.concepts]
    store = ctx.obj["store"]
    click.echo(f"🏋️  Training on {len(concepts)} concepts for {train_cfg.steps} steps...")
    model, log = train_base_model(concepts, libs["denoiser"], schedule_from_config(libs["schedule"]), train_cfg,
                                  cfg.benchmark.dominance_spec(), progress=ctx.obj["progress"])
    path = store.save_checkpoint("base.rstr", model)
    store.write_csv("train_log.csv", ["step", "loss"], ((k, v) for k, v in enumerate(log.losses)))
    click.echo(f"✅ Base model saved to: {path}")
    if log.losses:
        chart = store.path_for("charts/train_loss.png")
        store.ensure_directory_exists(chart.parent)
        VisualizationHelper.plot_train_log(log, "Base model training loss", str(chart))
        click.echo(f"📈 Loss {log.losses[0]:.4f} -> {log.losses[-1]:.4f}, chart: {chart}")


@cli.command()
@click.option("--model", "model_path", type=EXISTING_FILE, required=True)
@click.option("--prompt", required=True)
@click.option("--count", type=click.IntRange(1), default=8, show_default=True)
@click.option("--steps", type=click.IntRange(1), default=50, show_default=True, help="Sampler steps; must divide T")
@click.option("--embeddings", type=EXISTING_FILE, default=None, help="Placeholder vectors for <v0>...")
@click.option("--config", type=EXISTING_FILE, default=None)
@click.option("--name", default="samples.ppm", show_default=True, help="Mosaic file inside the output directory")
@click.pass_context
def sample(ctx, model_path, prompt, count, steps, embeddings, config, name):
    """Draw samples for a prompt and save them as a PPM mosaic"""
    cfg = _run_config(ctx, config)
    model = load_checkpoint(model_path)
    extra = load_embeddings(embeddings) if embeddings is not None else None
    sched = schedule_from_config(cfg.schedule.to_dataclass())
    images = sample_images(model, prompt, count, sched, SamplerConfig(steps=steps, seed=_seed(ctx, cfg)), extra)
    path = ctx.obj["store"].save_mosaic(name, images)
    probe = ProbeClassifier()
    labels = Counter(label for label, conf in probe.classify_batch(images) if conf >= probe.threshold)
    click.echo(f"🖼️  {count} samples of {prompt!r} saved to: {path}")
    summary = ", ".join(f"{label}: {n}" for label, n in sorted(labels.items())) or "no concept recognized"
    click.echo(f"🔎 Probe: {summary}")


@cli.command(name="forget")
@click.option("--model", "model_path", type=EXISTING_FILE, required=True)
@click.option("--concept", "concept_files", type=EXISTING_FILE, multiple=True, required=True,
              help="Concept spec JSON; repeat for multi-concept forgetting")
@click.option("--scope", type=click.Choice(["ca", "full"]), default="ca", show_default=True)
@click.option("--steps", type=click.IntRange(0), default=60, show_default=True)
@click.option("--lr", type=float, default=0.5, show_default=True)
@click.option("--batch", type=click.IntRange(1), default=4, show_default=True)
@click.option("--norm", type=click.Choice(["l2", "l1"]), default="l2", show_default=True)
@click.option("--reduce", type=click.Choice(["per_head", "head_mean"]), default="per_head", show_default=True)
@click.option("--token-source", type=click.Choice(["auto", "prompt", "inverted"]), default="auto", show_default=True)
@click.option("--out-patch", default="forget.rpch", show_default=True)
@click.option("--save-model", default=None, help="Also save the forgetting model under this name")
@click.option("--config", type=EXISTING_FILE, default=None, help="Run configuration JSON (schedule and seed)")
@click.pass_context
def forget_cmd(ctx, model_path, concept_files, scope, steps, lr, batch, norm, reduce, token_source,
               out_patch, save_model, config):
    """Forget one or more concepts by attention resteering"""
    run_cfg = _run_config(ctx, config)
    model = load_checkpoint(model_path)
    concepts = [load_concept_spec(p) for p in concept_files]
    cfg = ForgetConfig(concepts=concepts, scope=scope, steps=steps, lr=lr, batch=batch, norm=norm,
                       reduce=reduce, token_source=token_source, seed=_seed(ctx, run_cfg))
    sched = schedule_from_config(run_cfg.schedule.to_dataclass())
    store = ctx.obj["store"]
    click.echo(f"🧽 Forgetting {', '.join(c.name for c in concepts)} ({scope} scope, {steps} steps)...")
    forgotten, patch, log = forget(model, cfg, sched, progress=ctx.obj["progress"])
    path = store.save_patch(out_patch, patch)
    click.echo(f"✅ Patch over {patch.num_parameters()} parameters saved to: {path}")
    if log.losses:
        store.write_csv("forget_log.csv", ["step", "loss", "target_mass"],
                        zip(range(len(log)), log.losses, log.target_mass))
        click.echo(f"📉 Target attention mass {log.target_mass[0]:.4f} -> {log.target_mass[-1]:.4f}")
    if save_model:
        click.echo(f"💾 Forgetting model saved to: {store.save_checkpoint(save_model, forgotten)}")


@cli.command(name="invert")
@click.option("--model", "model_path", type=EXISTING_FILE, required=True)
@click.option("--concept", "concept_file", type=EXISTING_FILE, required=True)
@click.option("--steps", type=click.IntRange(0), default=150, show_default=True)
@click.option("--n-tokens", type=click.IntRange(1), default=1, show_default=True)
@click.option("--lr", type=float, default=0.02, show_default=True)
@click.option("--init", "init", type=click.Choice(["mean-embedding", "random"]), default="mean-embedding",
              show_default=True)
@click.option("--out-embeddings", default="embeddings.rtns", show_default=True)
@click.option("--config", type=EXISTING_FILE, default=None, help="Run configuration JSON (schedule and seed)")
@click.pass_context
def invert_cmd(ctx, model_path, concept_file, steps, n_tokens, lr, init, out_embeddings, config):
    """Learn placeholder vectors that reconstruct a concept's images"""
    run_cfg = _run_config(ctx, config)
    model = load_checkpoint(model_path)
    concept = load_concept_spec(concept_file)
    cfg = InversionConfig(n_tokens=n_tokens, steps=steps, lr=lr, init=init, seed=_seed(ctx, run_cfg))
    sched = schedule_from_config(run_cfg.schedule.to_dataclass())
    click.echo(f"🔁 Inverting {concept.name} into {n_tokens} token(s)...")
    result = invert(model, concept.reference_images, concept.templates, cfg, sched, progress=ctx.obj["progress"])
    meta = {"concept": concept.name, "steps": steps, "init": init,
            "final_loss": result.losses[-1] if result.losses else None}
    path = ctx.obj["store"].save_embeddings(out_embeddings, result.embeddings, meta)
    click.echo(f"✅ Embeddings saved to: {path}")


@cli.command()
@click.option("--original", type=EXISTING_FILE, required=True)
@click.option("--forgotten", type=EXISTING_FILE, required=True)
@click.option("--concept", "concept_file", type=EXISTING_FILE, required=True)
@click.option("--runs", type=click.IntRange(1), default=None, help="Override metrics.memorization_runs")
@click.option("--reference-prompt", default=None, help="Defaults to the concept's prompt words")
@click.option("--config", type=EXISTING_FILE, default=None)
@click.option("--name", default="memorization.json", show_default=True)
@click.pass_context
def score(ctx, original, forgotten, concept_file, runs, reference_prompt, config, name):
    """Memorization Score of a concept before and after forgetting"""
    cfg = _run_config(ctx, config)
    libs = cfg.to_dataclasses()
    metrics = libs["metrics"]
    concept = load_concept_spec(concept_file)
    report = memorization_delta(load_checkpoint(original), load_checkpoint(forgotten), concept,
                                libs["inversion"], schedule_from_config(libs["schedule"]),
                                runs or metrics.memorization_runs, metrics.anchor_images,
                                reference_prompt, ctx.obj["threads"])
    path = ctx.obj["store"].write_json(name, report.to_dict())
    click.echo(f"🧠 {concept.name}: {report.initial_score:.4f} -> {report.forgetting_score:.4f} "
               f"(delta {report.delta:+.4f}, noise band {report.noise_band:.4f}, {report.runs} runs)")
    for note in report.excluded:
        click.echo(f"⚠️  excluded {note}", err=True)
    click.echo(f"📄 Report saved to: {path}")


@cli.command()
@click.option("--original", type=EXISTING_FILE, required=True)
@click.option("--forgotten", type=EXISTING_FILE, required=True)
@click.option("--controls", required=True, help="Comma-separated ConceptBench-mini names")
@click.option("--seeds", type=click.IntRange(1), default=3, show_default=True)
@click.option("--config", type=EXISTING_FILE, default=None)
@click.option("--name", default="integrity.json", show_default=True)
@click.pass_context
def drift(ctx, original, forgotten, controls, seeds, config, name):
    """Integrity drift of control concepts"""
    cfg = _run_config(ctx, config)
    libs = cfg.to_dataclasses()
    analyzer = ForgettingAnalyzer(schedule_from_config(libs["schedule"]), libs["metrics"], libs["inversion"],
                                  threads=ctx.obj["threads"])
    specs = [concept_spec(get_concept(n)) for n in as_names(controls)]
    base_seed = _seed(ctx, cfg)
    report = analyzer.integrity(load_checkpoint(original), load_checkpoint(forgotten), specs,
                                seeds=[base_seed + k for k in range(seeds)])
    path = ctx.obj["store"].write_json(name, report.to_dict())
    click.echo("🛡️  Integrity:")
    for c in report.controls:
        click.echo(f"  {c.concept}: drift {c.l2_drift:.4f}, accuracy {c.accuracy_before:.2f} -> "
                   f"{c.accuracy_after:.2f}, attention ratio {c.attention_ratio:.3f}")
    click.echo(f"📄 Report saved to: {path}")


@cli.group()
def patch():
    """Create, apply and inspect model patches"""


@patch.command(name="apply")
@click.option("--model", "model_path", type=EXISTING_FILE, required=True)
@click.option("--patch", "patch_path", type=EXISTING_FILE, required=True)
@click.option("--out-model", required=True)
@click.pass_context
def patch_apply(ctx, model_path, patch_path, out_model):
    """Apply a patch to its base model"""
    model = apply_patch(load_checkpoint(model_path), load_patch(patch_path))
    click.echo(f"✅ Patched model saved to: {ctx.obj['store'].save_checkpoint(out_model, model)}")


@patch.command(name="diff")
@click.option("--base", type=EXISTING_FILE, required=True)
@click.option("--target", type=EXISTING_FILE, required=True)
@click.option("--scope", type=click.Choice(["ca", "full"]), default="ca", show_default=True)
@click.option("--out-patch", required=True)
@click.pass_context
def patch_diff(ctx, base, target, scope, out_patch):
    """Make a patch from two checkpoints"""
    before, after = load_checkpoint(base), load_checkpoint(target)
    p = make_patch(before.state_dict(), after.state_dict(), ParamScope(scope), {"method": "diff"})
    click.echo(f"✅ Patch over {p.num_parameters()} parameters saved to: {ctx.obj['store'].save_patch(out_patch, p)}")


@patch.command(name="info")
@click.option("--patch", "patch_path", type=EXISTING_FILE, required=True)
def patch_info(patch_path):
    """Print a patch's header and tensors"""
    p = load_patch(patch_path)
    click.echo(f"📦 Patch {patch_path}")
    click.echo("-" * 60)
    click.echo(f"Base fingerprint: {p.base_fingerprint.hex()}")
    click.echo(f"Result fingerprint: {p.result_fingerprint}")
    for key in sorted(p.metadata):
        if key != "result_fingerprint":
            click.echo(f"{key}: {p.metadata[key]}")
    click.echo(f"Tensors: {len(p.names)}, parameters: {p.num_parameters()}, empty: {p.is_empty()}")
    for name, delta in p.deltas.items():
        click.echo(f"  {name} {tuple(delta.shape)} max |delta| {float(abs(delta).max()) if delta.size else 0.0:.3g}")


@cli.command()
@click.option("--config", type=EXISTING_FILE, required=True)
@click.pass_context
def bench(ctx, config):
    """Run a full benchmark configuration"""
    cfg = _run_config(ctx, config)
    click.echo(f"🏁 Running benchmark {config} ({cfg.benchmark.method}, targets {', '.join(cfg.benchmark.targets)})...")
    report = run_benchmark(cfg, ctx.obj["store"], ctx.obj["threads"], ctx.obj["progress"], base_dir=config.parent)
    for method in report["methods"]:
        for t in method["targets"]:
            memo = t["memorization"]
            click.echo(f"  {method['method']} {t['concept']}: accuracy {t['accuracy_before']:.2f} -> "
                       f"{t['accuracy_after']:.2f}, memorization {memo['initial_score']:.4f} -> "
                       f"{memo['forgetting_score']:.4f}")
    click.echo(f"✅ Report written to: {ctx.obj['store'].root}")


@cli.command()
@click.pass_context
def selftest(ctx):
    """Gradient checks and invariants; exit 0 when all pass"""
    results = run_selftest(ctx.obj["seed"] or 0)
    for r in results:
        mark = "✅" if r.passed else "❌"
        click.echo(f"{mark} {r.name} ({r.value:.3g}){' ' + r.detail if r.detail else ''}")
    failed = [r for r in results if not r.passed]
    if failed:
        click.echo(f"❌ {len(failed)} of {len(results)} checks failed", err=True)
        ctx.exit(1)
    click.echo(f"🎉 All {len(results)} checks passed")
