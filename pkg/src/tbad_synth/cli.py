"""Command Line Interface for tbad-synth."""

from dataclasses import fields, is_dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import click
import numpy as np
import yaml
from rich.console import Console
from rich.table import Table

from . import __version__
from .artifacts import (
    MANIFEST,
    STAGES,
    RunDir,
    load_dataset,
    load_samples,
    sample_dir,
    write_dataset,
    write_pgm,
    write_ppm,
    write_rows,
    write_sample_sidecar,
)
from .config import SMOKE_OVERRIDES, ConfigManager, RunConfig, config_manager, set_dotted
from .denoiser import merge_adapters
from .embed import nearest_real, tsne, write_embedding_csv
from .errors import ArtifactError, ValidationError
from .metrics import (
    classifier_accuracy,
    fid,
    load_encoder,
    pair_msssim,
    save_encoder,
    train_feature_encoder,
)
from .numerics import PRECISIONS, compute_dtype, make_rng, save_tensor, storage_precision
from .phantom import (
    CLASS_IDS,
    CLASS_PROMPTS,
    LABEL_NAMES,
    SPLITS,
    build_dataset,
    class_token,
    stack,
)
from .report import (
    MetricReport,
    build_tables,
    read_dice_csv,
    read_metrics_csv,
    render_text,
    warn_gaps,
    write_metrics_csv,
    write_report_csv,
)
from .sampler import SAMPLERS, sample_images
from .schedule import dump_schedule_csv, schedule_from_config
from .segcheck import LUMEN_LABELS, overlay_rgb, pseudo_label, segment, train_segnet, utility_probe
from .trainer import load_checkpoint, save_checkpoint, train_base, train_lora, write_loss_curve

console = Console()

OVERLAYS_PER_CLASS = 4


def _parse_override(text: str) -> Tuple[str, object]:
    if "=" not in text:
        raise ValidationError(f"--set expects KEY=VALUE, got '{text}'")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


@click.group()
@click.version_option(version=__version__)
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False, path_type=Path),
    help="YAML config, or a stage manifest.yaml to rerun with its config",
)
@click.option("--seed", type=int, help="Global seed")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory")
@click.option("--precision", type=click.Choice(PRECISIONS), help="Arithmetic/storage precision")
@click.option("--run-id", help="Run directory name (default seed<N>)")
@click.option("--smoke", is_flag=True, help="Desk-scale preset: short training runs")
@click.option(
    "--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config key"
)
@click.pass_context
def cli(ctx, config_path, seed, out_dir, precision, run_id, smoke, overrides):
    """tbad-synth - class-conditioned diffusion synthesis of TBAD CTA phantoms.

    Stages run in order: gen-data, train-base, finetune-lora, sample,
    evaluate, embed, segcheck, report. Every stage writes into
    <out>/<run-id>/<stage>/ together with a manifest.yaml.
    """
    manager = ConfigManager(config_path) if config_path else config_manager
    missing = config_path is not None and not config_path.exists()
    if missing and ctx.invoked_subcommand != "config":
        console.print(f"⚠️  {config_path} not found; using defaults", style="yellow")
    cfg = RunConfig.from_dict(manager.load().to_dict())
    if smoke:
        for key, value in SMOKE_OVERRIDES.items():
            set_dotted(cfg, key, value)
    for text in overrides:
        set_dotted(cfg, *_parse_override(text))
    flags = {"seed": seed, "out_dir": out_dir, "precision": precision, "run_id": run_id}
    for key, value in flags.items():
        if value is not None:
            setattr(cfg, key, value)
    compute_dtype(cfg.precision)
    ctx.obj = cfg


def _run(ctx: click.Context) -> RunDir:
    return RunDir(ctx.obj)


# Configuration ---------------------------------------------------------------


def _flatten(value, prefix: str = "") -> List[Tuple[str, str]]:
    if is_dataclass(value):
        rows = []
        for f in fields(value):
            rows += _flatten(getattr(value, f.name), f"{prefix}{f.name}.")
        return rows
    return [(prefix.rstrip("."), str(value))]


@cli.group()
def config():
    """Manage configuration settings."""
    pass


@config.command("show")
@click.pass_obj
def config_show(cfg: RunConfig):
    """Show the effective configuration."""
    table = Table(title="tbad-synth Configuration")
    table.add_column("Setting", style="cyan")
    table.add_column("Value", style="green")
    for key, value in _flatten(cfg):
        table.add_row(key, value)
    table.add_row("(run directory)", str(cfg.run_dir))
    table.add_row("(effective workers)", str(cfg.workers))
    console.print(table)


@config.command("init")
@click.option("--path", type=click.Path(dir_okay=False, path_type=Path), help="File to write")
@click.pass_obj
def config_init(cfg: RunConfig, path: Optional[Path]):
    """Write a configuration file with prompts for the main settings."""
    click.echo("Setting up tbad-synth configuration...")
    seed = click.prompt("Global seed", default=cfg.seed, type=int)
    out_dir = click.prompt("Output directory", default=cfg.out_dir)
    precision = click.prompt(
        "Precision", default=cfg.precision, type=click.Choice(PRECISIONS)
    )
    total = click.prompt("Phantoms in the dataset", default=cfg.data.total, type=int)
    size = click.prompt("Image size (pixels)", default=cfg.data.size, type=int)
    epochs = click.prompt("Base training epochs", default=cfg.train.epochs, type=int)
    workers = click.prompt("Parallel workers", default=cfg.parallel_workers, type=int)

    path = path or click.get_current_context().find_root().params.get("config_path")
    manager = ConfigManager(path) if path else config_manager
    manager._config = cfg
    manager.update(
        seed=seed,
        out_dir=out_dir,
        precision=precision,
        data__total=total,
        data__size=size,
        train__epochs=epochs,
        parallel_workers=workers,
    )
    console.print(f"✅ Configuration written to {manager.config_path}", style="green")


# Pipeline stages -------------------------------------------------------------


@cli.command("gen-data")
@click.pass_context
def gen_data(ctx):
    """Render the phantom dataset and its train/val/test split."""
    cfg: RunConfig = ctx.obj
    run = _run(ctx)
    manifest = run.begin("data")
    dataset = build_dataset(cfg.data, cfg.seed, cfg.workers)
    written = write_dataset(run, dataset, cfg.data.write_pgm)
    manifest.notes["counts"] = {int(c): int(n) for c, n in dataset.counts.items()}
    manifest.notes["prompts"] = {int(c): p for c, p in CLASS_PROMPTS.items()}
    run.finish(manifest, written)

    table = Table(title=f"Phantom dataset ({run.root})")
    table.add_column("Class", style="cyan")
    for name in SPLITS:
        table.add_column(name, style="green", justify="right")
    for c in CLASS_IDS:
        table.add_row(
            f"C{c}", *[str(sum(s.class_id == c for s in dataset.split(n))) for n in SPLITS]
        )
    console.print(table)
    console.print(f"✅ Generated {sum(dataset.counts.values())} phantoms", style="green")


@cli.command("train-base")
@click.pass_context
def train_base_cmd(ctx):
    """Train the conditional denoiser on the train split."""
    cfg: RunConfig = ctx.obj
    run = _run(ctx)
    manifest = run.begin("base")
    dataset = load_dataset(run, "base", ["train", "val"], manifest)
    result = train_base(dataset, cfg)

    out = run.stage_dir("base")
    ckpt = out / "model.ckpt"
    stats = save_checkpoint(result.params, ckpt, storage_precision(cfg.precision))
    write_loss_curve(out / "loss_curve.csv", result.curve)
    dump_schedule_csv(schedule_from_config(cfg.schedule), out / "schedule.csv")
    manifest.notes.update(
        rejected_steps=result.rejected_steps,
        fp16_overflows=stats.fp16_overflows,
        first_loss=float(result.curve[0].loss),
        final_loss=float(result.curve[-1].loss),
    )
    run.finish(manifest, [ckpt, out / "loss_curve.csv", out / "schedule.csv"])
    console.print(f"✅ Checkpoint written to {ckpt}", style="green")


@cli.command("finetune-lora")
@click.option("--class", "class_id", type=click.IntRange(1, 5), help="Subject class")
@click.pass_context
def finetune_lora(ctx, class_id):
    """Fine-tune low-rank adapters on one class with prior preservation."""
    cfg: RunConfig = ctx.obj
    if class_id is not None:
        cfg.lora.subject_class = class_id
    run = _run(ctx)
    base_path = run.require("base", "finetune-lora") / "model.ckpt"
    manifest = run.begin("lora")
    run.record_input(manifest, base_path)
    base = load_checkpoint(base_path)
    dataset = load_dataset(run, "lora", ["train", "val"], manifest)
    subject = cfg.lora.subject_class
    train = [s for s in dataset.train if s.class_id == subject]
    val = [s for s in dataset.val if s.class_id == subject]
    result = train_lora(base, train, cfg, val_samples=val)

    out = run.stage_dir("lora")
    ckpt = out / "adapters.ckpt"
    stats = save_checkpoint(
        result.params, ckpt, storage_precision(cfg.precision), parts="adapters"
    )
    write_loss_curve(out / "loss_curve.csv", result.curve)
    manifest.notes.update(
        subject_class=subject,
        subject_images=len(train),
        base_hash=result.base_hash,
        rejected_steps=result.rejected_steps,
        fp16_overflows=stats.fp16_overflows,
    )
    run.finish(manifest, [ckpt, out / "loss_curve.csv"])
    console.print(f"✅ Adapters written to {ckpt}", style="green")


def _adapter_class(run: RunDir) -> Optional[int]:
    if not run.has("lora"):
        return None
    return int(run.manifest("lora").config["lora"]["subject_class"])


@cli.command("sample")
@click.option("--steps", type=click.IntRange(min=1), help="Sampling steps")
@click.option("--sampler", "method", type=click.Choice(SAMPLERS), help="Sampler")
@click.option("--guidance", type=click.FloatRange(min=0.0), help="Guidance scale g")
@click.option("--class", "class_ids", type=click.IntRange(1, 5), multiple=True,
              help="Class to sample (repeatable; default all)")
@click.option("--neg-class", type=click.IntRange(0, 5), help="Negative token (0 = null)")
@click.option("--n", "n", type=click.IntRange(min=1), help="Images per class")
@click.option("--no-lora", is_flag=True, help="Ignore fine-tuned adapters")
@click.option("--merge-lora", is_flag=True, help="Fold adapters into the base weights first")
@click.pass_context
def sample(ctx, steps, method, guidance, class_ids, neg_class, n, no_lora, merge_lora):
    """Generate images per class with the trained model."""
    cfg: RunConfig = ctx.obj
    for key, value in {"steps": steps, "method": method, "guidance": guidance,
                       "neg_token": neg_class}.items():
        if value is not None:
            setattr(cfg.sampler, key, value)
    if n is not None:
        cfg.eval.samples_per_class = n
    cfg.sampler.validate()
    run = _run(ctx)
    base_path = run.require("base", "sample") / "model.ckpt"
    adapter_class = None if no_lora else _adapter_class(run)

    previous = run.manifest("samples") if run.has("samples") else None
    manifest = run.begin("samples")
    if previous is not None:
        manifest.notes = dict(previous.notes)
        manifest.inputs = dict(previous.inputs)
    run.record_input(manifest, base_path)
    base = load_checkpoint(base_path)
    tuned = None
    if adapter_class is not None:
        adapter_path = run.stage_dir("lora") / "adapters.ckpt"
        run.record_input(manifest, adapter_path)
        tuned = load_checkpoint(base_path, adapter_path)
        if merge_lora:
            tuned = merge_adapters(tuned)

    sched = schedule_from_config(cfg.schedule)
    store = "fp64" if cfg.precision == "fp64" else "fp32"
    for c in class_ids or CLASS_IDS:
        scfg = replace(cfg.sampler, token=class_token(c), seed=cfg.seed)
        model = tuned if c == adapter_class else base
        result = sample_images(
            model, sched, scfg, cfg.eval.samples_per_class, cfg.data.size, cfg.workers
        )
        out = sample_dir(run, c)
        save_tensor(out / "images.tns", result.images, store)
        rows = [
            {"index": i, "seed": cfg.seed, "method": scfg.method, "steps": scfg.steps,
             "g": scfg.guidance, "pos": scfg.token, "neg": scfg.neg_token}
            for i in result.seeds
        ]
        write_sample_sidecar(out / "samples.csv", rows)
        if cfg.data.write_pgm:
            for i, image in zip(result.seeds, result.images):
                write_pgm(out / f"{i:04d}.pgm", image)
        manifest.notes[f"class{c}"] = {
            "n": len(result.images),
            "evaluations": result.evaluations,
            "adapters": c == adapter_class,
            "merged": merge_lora and c == adapter_class,
            "prompt": CLASS_PROMPTS[c],
        }
        console.print(
            f"✅ Class {c}: {len(result.images)} images, {result.evaluations} model evaluations",
            style="green",
        )
    outputs = [p for p in sorted(run.stage_dir("samples").rglob("*"))
               if p.is_file() and p.name != MANIFEST]
    run.finish(manifest, outputs)


def _sampled(run: RunDir, consumer: str, manifest) -> Dict[int, np.ndarray]:
    run.require("samples", consumer)
    synth: Dict[int, np.ndarray] = {}
    for c in CLASS_IDS:
        found = load_samples(run, c)
        if found is not None:
            synth[c], path = found
            run.record_input(manifest, path)
    if not synth:
        raise ArtifactError(f"{consumer} found no sampled images; run `tbad-synth sample` first")
    return synth


@cli.command("evaluate")
@click.pass_context
def evaluate(ctx):
    """MS-SSIM diversity per class, FID against real test phantoms, classifier accuracy."""
    cfg: RunConfig = ctx.obj
    run = _run(ctx)
    run.require("samples", "evaluate")
    manifest = run.begin("evaluate")
    synth = _sampled(run, "evaluate", manifest)
    dataset = load_dataset(run, "evaluate", SPLITS, manifest)
    enc = train_feature_encoder(dataset, cfg.eval, cfg.seed)

    report = MetricReport(config=cfg.to_dict())
    real_all = dataset.train + dataset.val + dataset.test
    for c in CLASS_IDS:
        real = [s.image for s in real_all if s.class_id == c]
        rng = make_rng(cfg.seed, "msssim", "real", c)
        report.real_msssim[c] = (
            pair_msssim(real, real, cfg.eval.msssim_pairs, rng, workers=cfg.workers).mean
            if len(real) >= 2 else None
        )
        images = synth.get(c)
        if images is None or len(images) < 2:
            report.synth_msssim[c] = None
            report.accuracy[c] = None if images is None else classifier_accuracy(enc, images, c)
            continue
        images = list(images)
        rng = make_rng(cfg.seed, "msssim", "synth", c)
        report.synth_msssim[c] = pair_msssim(
            images, images, cfg.eval.msssim_pairs, rng, workers=cfg.workers
        ).mean
        report.accuracy[c] = classifier_accuracy(enc, np.stack(images), c)

    size = cfg.data.size
    real_test = stack(dataset.test)[0] if dataset.test else np.zeros((0, size, size))
    synth_all = np.concatenate([synth[c] for c in sorted(synth)])
    n = min(cfg.eval.fid_n, len(real_test), len(synth_all))
    if n < 2:
        console.print(f"⚠️  FID skipped: only {n} image(s) available per set", style="yellow")
    else:
        if n < cfg.eval.fid_n:
            console.print(
                f"⚠️  FID uses n={n} (requested {cfg.eval.fid_n}); sets are smaller",
                style="yellow",
            )
        report.n_fid = n
        report.fid = fid(real_test, synth_all, enc, n, make_rng(cfg.seed, "fid", "synth"))
        noise = make_rng(cfg.seed, "fid", "noise").random((n,) + real_test.shape[1:])
        report.fid_noise = fid(real_test, noise, enc, n, make_rng(cfg.seed, "fid", "noise-set"))

    out = run.stage_dir("evaluate")
    written = [write_metrics_csv(report, out / "metrics.csv")]
    written += save_encoder(enc, out / "encoder")
    manifest.notes["encoder_accuracy"] = float(enc.accuracy)
    run.finish(manifest, written)
    for table in build_tables(report):
        console.print(table)
    console.print(f"✅ Metrics written to {written[0]}", style="green")


@cli.command("embed")
@click.option("--k", type=click.IntRange(min=1), default=1, help="Nearest real images per sample")
@click.pass_context
def embed(ctx, k):
    """t-SNE of encoder features (real test vs synthetic) and nearest-real matches."""
    cfg: RunConfig = ctx.obj
    run = _run(ctx)
    enc_dir = run.require("evaluate", "embed") / "encoder"
    manifest = run.begin("embed")
    enc = load_encoder(enc_dir)
    run.record_input(manifest, enc_dir / "encoder.yaml")
    synth = _sampled(run, "embed", manifest)
    dataset = load_dataset(run, "embed", ["test"], manifest)
    if not dataset.test:
        raise ArtifactError("embed needs real test phantoms; rerun gen-data with a larger dataset")
    real_images, _, real_classes = stack(dataset.test)
    synth_classes = [c for c in sorted(synth) for _ in range(len(synth[c]))]
    synth_images = np.concatenate([synth[c] for c in sorted(synth)])

    features = enc.features(np.concatenate([real_images, synth_images]))
    result = tsne(features, cfg.tsne, cfg.seed)
    out = run.stage_dir("embed")
    sets = ["real"] * len(real_images) + ["synth"] * len(synth_images)
    ids = [s.seed for s in dataset.test] + list(range(len(synth_images)))
    classes = [int(c) for c in real_classes] + synth_classes
    write_embedding_csv(out / "embedding.csv", result.coords, sets, classes, ids)

    nearest = nearest_real(list(synth_images), list(real_images), k, cfg.workers)
    rows = []
    for i, (c, idx) in enumerate(zip(synth_classes, nearest)):
        for rank, j in enumerate(idx, start=1):
            rows.append([i, c, rank, dataset.test[j].seed, dataset.test[j].class_id])
    write_rows(out / "nearest.csv", ["synth_id", "class", "rank", "real_seed", "real_class"], rows)
    write_rows(
        out / "kl.csv", ["kl_initial", "kl_final", "perplexity"],
        [[repr(result.kl_initial), repr(result.kl_final), repr(result.perplexity)]],
    )
    run.finish(manifest, [out / "embedding.csv", out / "nearest.csv", out / "kl.csv"])
    console.print(
        f"✅ t-SNE of {len(features)} points: "
        f"KL {result.kl_initial:.4f} → {result.kl_final:.4f}",
        style="green",
    )


@cli.command("segcheck")
@click.option("--augment", is_flag=True, help="Also retrain with pseudo-labelled synthetic images")
@click.pass_context
def segcheck(ctx, augment):
    """Train the segmentation probe on real phantoms and check synthetic images."""
    cfg: RunConfig = ctx.obj
    run = _run(ctx)
    run.require("samples", "segcheck")
    manifest = run.begin("segcheck")
    synth = _sampled(run, "segcheck", manifest)
    dataset = load_dataset(run, "segcheck", SPLITS, manifest)
    result = train_segnet(dataset, cfg.seg, cfg.seed)
    probe = utility_probe(result.params, synth, cfg.seg.detect_px)

    augmented: Dict[int, float] = {}
    if augment:
        images = np.concatenate([synth[c] for c in sorted(synth)])
        classes = [c for c in sorted(synth) for _ in range(len(synth[c]))]
        extra = pseudo_label(result.params, images, classes)
        augmented = train_segnet(dataset, cfg.seg, cfg.seed, extra).dice

    out = run.stage_dir("segcheck")
    dice_rows = [
        [LABEL_NAMES[k], repr(result.dice[k]), repr(augmented[k]) if augment else ""]
        for k in LUMEN_LABELS
    ]
    written = [write_rows(out / "dice.csv", ["label", "dice", "dice_augmented"], dice_rows)]
    probe_rows = probe.rows()
    header = list(probe_rows[0])
    probe_cells = [[r[h] for h in header] for r in probe_rows]
    written.append(write_rows(out / "probe.csv", header, probe_cells))
    for c, images in sorted(synth.items()):
        shown = images[:OVERLAYS_PER_CLASS]
        for i, (image, mask) in enumerate(zip(shown, segment(result.params, shown))):
            written.append(write_ppm(out / "overlays" / f"class{c}_{i:02d}.ppm",
                                     overlay_rgb(image, mask)))
    manifest.notes["dice_empty_pairs"] = result.empty_pairs
    run.finish(manifest, written)

    table = Table(title=f"Lumen detection in synthetic images (>= {probe.detect_px} px)")
    for name in header:
        table.add_column(name, style="cyan" if name == "class" else "green", justify="right")
    for r in probe_rows:
        table.add_row(*[f"{r[h]:.2f}" if isinstance(r[h], float) else str(r[h]) for h in header])
    console.print(table)


@cli.command("report")
@click.pass_context
def report_cmd(ctx):
    """Render the metric table, Dice appendix and deviation footnotes."""
    run = _run(ctx)
    metrics_path = run.require("evaluate", "report") / "metrics.csv"
    manifest = run.begin("report")
    run.record_input(manifest, metrics_path)
    report = read_metrics_csv(metrics_path)
    report.config = run.manifest("evaluate").config
    if run.has("segcheck"):
        dice_path = run.stage_dir("segcheck") / "dice.csv"
        run.record_input(manifest, dice_path)
        read_dice_csv(dice_path, report)
    gaps = warn_gaps(report)

    out = run.stage_dir("report")
    text = render_text(report)
    (out / "report.txt").write_text(text)
    written = [out / "report.txt", *write_report_csv(report, out / "report.csv")]
    manifest.notes["gaps"] = gaps
    run.finish(manifest, written)
    console.print(text, markup=False, highlight=False)


@cli.command("status")
@click.pass_obj
def status(cfg: RunConfig):
    """Show which stages have artifacts and check their integrity."""
    run = RunDir(cfg)
    console.print(f"tbad-synth run {run.root}", style="bold blue")
    console.print()
    table = Table()
    table.add_column("Stage", style="cyan")
    table.add_column("Command")
    table.add_column("State")
    table.add_column("Files", justify="right")
    for stage, command in STAGES.items():
        if run.has(stage):
            table.add_row(stage, command, "✅ done", str(len(run.manifest(stage).outputs)))
        else:
            table.add_row(stage, command, "-", "0")
    console.print(table)

    problems = run.verify()
    if problems:
        for p in problems:
            console.print(f"❌ {p}", style="red")
    else:
        console.print("✅ Artifacts match their manifests", style="green")


def main():
    """Main entry point."""
    cli()


if __name__ == "__main__":
    main()
