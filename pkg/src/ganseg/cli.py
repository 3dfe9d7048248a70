"""Command-line surface for every pipeline stage.

Every command reads the project config, writes its artifacts under the
project root, and exits nonzero with a one-line `error: <reason>` on stderr.
Commands are idempotent for fixed config and seeds.
"""

import json
import sys
from functools import wraps
from pathlib import Path

import click
import numpy as np

from . import __version__
from .archive import load_archive, save_archive
from .backbone import (generate_with_taps, load_checkpoint, realism_probe,
                       sample_latent, save_checkpoint, train_toy_gan)
from .datasets import (load_annotation, load_dataset_dir, load_image,
                       make_synthetic_parts_dataset, oracle_annotate,
                       save_annotation, save_image, write_dataset_dir)
from .distillation import (build_unet, generate_distilled_dataset,
                           load_distilled_dataset, load_unet, predict_unet,
                           train_autoshot, train_supervised_baseline, save_unet,
                           UNetSpec)
from .errors import GansegError, ProjectError
from .evaluation import evaluate_set
from .inversion import InversionConfig, invert, represent_image, save_loss_trace
from .project import Project, init_project
from .report import (save_iou_report, save_label_efficiency_curve,
                     save_loss_curve, save_prediction_panel, write_csv)
from .representation import (LayerSelection, extract_representation,
                             save_representation)
from .segmenters import (FewShotTrainConfig, SegmenterSpec, build_segmenter,
                         load_segmenter, logits_to_mask, predict,
                         save_segmenter, train_fewshot, upsample_logits)


def _fail(reason: str, code: int = 1):
    print(f"error: {reason}", file=sys.stderr)
    sys.exit(code)


def handle_errors(fn):
    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ProjectError as e:
            _fail(str(e), code=2)
        except GansegError as e:
            _fail(str(e))
    return wrapper


def _load_project(path) -> Project:
    return Project.load(path)


def _selection_from_option(project, layers):
    if layers is None:
        return project.layer_selection()
    if layers in ("all", "all_but_last", "group_A", "group_B", "group_C"):
        return LayerSelection(mode=layers)
    ids = [int(tok) for tok in layers.split(",")]
    return LayerSelection(mode="explicit", explicit_ids=ids)


def _representation_for_sample(project, gen, sel, sample_id):
    latent_path = project.sample_dir(sample_id) / "latent.gsar"
    if not latent_path.exists():
        raise ProjectError(f"missing artifact: latent for sample {sample_id}",
                           artifact="latent")
    from .backbone import LatentCode
    _, meta, tensors = load_archive(latent_path, expect_kind="latent")
    code = LatentCode(values=tensors["values"],
                      space_tag=meta.get("space_tag", "input"))
    _, stack = generate_with_taps(gen, code, sel)
    return extract_representation(stack, sel, target_res=project.target_res())


@click.group()
@click.option("--project", "-p", "project_path", default="project.json",
              show_default=True, help="Path to project.json or its directory.")
@click.version_option(version=__version__, prog_name="ganseg")
@click.pass_context
def main(ctx, project_path):
    """Few-shot part segmentation from generator features."""
    ctx.ensure_object(dict)
    ctx.obj["project_path"] = project_path


@main.command()
@click.option("--root", default=".", show_default=True)
@click.option("--resolution", default=32, show_default=True)
@click.option("--seed", default=0, show_default=True)
@handle_errors
def init(root, resolution, seed):
    """Write a default project.json."""
    path = init_project(root, {"resolution": resolution, "seed": seed})
    click.echo(f"wrote {path}")


@main.command("make-dataset")
@click.option("--size", default=None, type=int, help="Number of samples.")
@click.option("--seed", default=None, type=int)
@click.pass_context
@handle_errors
def make_dataset(ctx, size, seed):
    """Render the synthetic parts dataset under the dataset root."""
    project = _load_project(ctx.obj["project_path"])
    overrides = {}
    if size is not None:
        overrides["size"] = size
    if seed is not None:
        overrides["seed"] = seed
    cfg = project.dataset_config(**overrides)
    images, annotations = make_synthetic_parts_dataset(cfg)
    root = write_dataset_dir(images, annotations, project.dataset_root,
                             rng_seed=cfg.rng_seed)
    click.echo(f"rendered {cfg.dataset_size} samples into {root}")


@main.command("train-gan")
@click.option("--steps", default=None, type=int)
@click.option("--seed", default=None, type=int)
@click.pass_context
@handle_errors
def train_gan(ctx, steps, seed):
    """Train the toy GAN on the dataset images."""
    project = _load_project(ctx.obj["project_path"])
    images, _, split = project.require_dataset()
    if split:
        images = images[split["train"]]
    overrides = {} if steps is None else {"steps": steps}
    cfg = project.gan_config(**overrides)
    rng_seed = project.seed if seed is None else seed

    def progress(rec):
        click.echo(f"  step {rec['step']}: d_loss={rec['d_loss']:.3f} "
                   f"g_loss={rec['g_loss']:.3f}")

    gen, trace = train_toy_gan(images, cfg, rng_seed=rng_seed, progress=progress)
    save_checkpoint(gen, project.checkpoint_path)
    write_csv(project.reports_dir / "gan_train.csv", trace)
    save_loss_curve(trace, project.reports_dir / "gan_train.png", "GAN training")
    probe = realism_probe(gen, images, rng_seed=rng_seed)
    click.echo(f"checkpoint: {project.checkpoint_path} (probe accuracy {probe:.3f})")


@main.command("gen-samples")
@click.option("--n", default=10, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.pass_context
@handle_errors
def gen_samples(ctx, n, seed):
    """Generate n samples and register them (image + latent) for annotation."""
    project = _load_project(ctx.obj["project_path"])
    gen = project.require_generator()
    sel = project.layer_selection()
    for i in range(n):
        sample_seed = seed * 1_000_003 + i
        z = sample_latent(gen, sample_seed)
        image, _ = generate_with_taps(gen, z, sel)
        d = project.sample_dir(i)
        d.mkdir(parents=True, exist_ok=True)
        save_image(image, d / "image.png")
        save_archive(d / "latent.gsar", "latent", {"values": z.values},
                     meta={"space_tag": z.space_tag, "seed": sample_seed})
        (d / "meta.json").write_text(json.dumps({"seed": sample_seed, "id": i}))
    click.echo(f"registered {n} samples under {project.samples_dir}")


@main.command("annotate-oracle")
@click.option("--sample", "sample_ids", multiple=True, type=int,
              help="Sample ids; default: all registered samples.")
@click.pass_context
@handle_errors
def annotate_oracle(ctx, sample_ids):
    """Annotate registered samples with the nearest-color oracle (desk-scale
    stand-in for a human annotator)."""
    project = _load_project(ctx.obj["project_path"])
    ids = list(sample_ids) or [s["id"] for s in project.list_samples()]
    if not ids:
        raise ProjectError("missing artifact: samples; run gen-samples first",
                           artifact="samples")
    for sid in ids:
        image = load_image(project.sample_dir(sid) / "image.png")
        ann = oracle_annotate(image, project.n_classes)
        save_annotation(ann, project.sample_dir(sid) / "mask.png")
    click.echo(f"annotated {len(ids)} samples")


@main.command()
@click.option("--layers", default=None,
              help="all | all_but_last | group_A/B/C | comma-separated ids")
@click.option("--sample", "sample_ids", multiple=True, type=int)
@click.pass_context
@handle_errors
def extract(ctx, layers, sample_ids):
    """Extract pixel representations for registered samples (spilled to disk)."""
    project = _load_project(ctx.obj["project_path"])
    gen = project.require_generator()
    sel = _selection_from_option(project, layers)
    ids = list(sample_ids) or [s["id"] for s in project.list_samples()]
    if not ids:
        raise ProjectError("missing artifact: samples; run gen-samples first",
                           artifact="samples")
    for sid in ids:
        rep = _representation_for_sample(project, gen, sel, sid)
        save_representation(rep, project.sample_dir(sid) / "rep.gsar")
    click.echo(f"extracted {len(ids)} representations "
               f"(C={rep.n_channels}, {rep.resolution[0]}x{rep.resolution[1]})")


@main.command("invert")
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--steps", default=None, type=int)
@click.option("--seed", default=0, show_default=True)
@click.option("--out-latent", default=None, type=click.Path())
@click.option("--out-trace", default=None, type=click.Path())
@click.pass_context
@handle_errors
def invert_cmd(ctx, image_path, steps, seed, out_latent, out_trace):
    """Optimize a latent code that reproduces the given image."""
    project = _load_project(ctx.obj["project_path"])
    gen = project.require_generator()
    overrides = {} if steps is None else {"steps": steps}
    cfg = project.inversion_config(**overrides)
    image = load_image(image_path)
    result = invert(gen, image, cfg, rng_seed=seed)
    stem = Path(image_path).stem
    out_latent = Path(out_latent or project.root / "artifacts" / f"{stem}_latent.gsar")
    out_trace = Path(out_trace or project.root / "artifacts" / f"{stem}_trace.csv")
    save_archive(out_latent, "latent", {"values": result.code.values},
                 meta={"space_tag": result.code.space_tag,
                       "best_loss": result.best_loss})
    save_loss_trace(result.loss_trace, out_trace)
    click.echo(f"best_loss={result.best_loss:.6f} latent={out_latent} trace={out_trace}")


@main.command("train-fewshot")
@click.option("--arch", default=None,
              type=click.Choice(["MLP0", "MLP1", "MLP2", "CNN_S", "CNN_M", "CNN_L",
                                 "CNN_DEFAULT"]))
@click.option("--shots", default=None, type=int,
              help="Use the first k annotated samples; default: all annotated.")
@click.option("--epochs", default=None, type=int)
@click.option("--seed", default=None, type=int)
@click.pass_context
@handle_errors
def train_fewshot_cmd(ctx, arch, shots, epochs, seed):
    """Train the few-shot segmenter on the annotated samples."""
    project = _load_project(ctx.obj["project_path"])
    gen = project.require_generator()
    sel = project.layer_selection()
    annotated = project.annotated_samples()
    if not annotated:
        raise ProjectError("no annotations", artifact="annotations")
    if shots is not None:
        annotated = annotated[:shots]
    pairs = []
    for entry in annotated:
        rep = _representation_for_sample(project, gen, sel, entry["id"])
        pairs.append((rep, project.load_mask(entry["id"])))

    arch = arch or project.config["fewshot"].get("arch", "CNN_DEFAULT")
    overrides = {}
    if epochs is not None:
        overrides["epochs"] = epochs
    if seed is not None:
        overrides["rng_seed"] = seed
    cfg = project.fewshot_config(**overrides)
    spec = SegmenterSpec(variant=arch, input_channels=pairs[0][0].n_channels,
                         n_classes=project.n_classes)
    model = build_segmenter(spec, rng_seed=cfg.rng_seed)
    model, trace = train_fewshot(model, pairs, cfg)
    path = project.model_path("fewshot")
    save_segmenter(model, path)
    write_csv(project.reports_dir / "fewshot_train.csv",
              [{"epoch": i, "loss": v} for i, v in enumerate(trace)])
    save_loss_curve(trace, project.reports_dir / "fewshot_train.png",
                    f"few-shot {arch}, k={len(pairs)}")
    click.echo(f"trained {arch} on {len(pairs)} shots -> {path} "
               f"(final loss {trace[-1]:.4f})")


def _predict_fewshot(project, gen, sel, image=None, sample_id=None, steps=None):
    model = load_segmenter(project.require_model("fewshot"))
    if sample_id is not None:
        rep = _representation_for_sample(project, gen, sel, sample_id)
        image = load_image(project.sample_dir(sample_id) / "image.png")
    else:
        cfg = project.inversion_config(**({} if steps is None else {"steps": steps}))
        rep, _ = represent_image(gen, image, sel, cfg,
                                 target_res=project.target_res())
    logits = upsample_logits(predict(model, rep), image.shape[:2])
    return image, logits


@main.command("predict")
@click.option("--sample", "sample_id", default=None, type=int)
@click.option("--image", "image_path", default=None, type=click.Path(exists=True))
@click.option("--use-autoshot", is_flag=True, default=False)
@click.option("--steps", default=None, type=int, help="Inversion budget for raw images.")
@click.option("--out", default=None, type=click.Path())
@click.pass_context
@handle_errors
def predict_cmd(ctx, sample_id, image_path, use_autoshot, steps, out):
    """Segment a registered sample or an image file; writes mask + figure."""
    project = _load_project(ctx.obj["project_path"])
    if (sample_id is None) == (image_path is None):
        raise ProjectError("pass exactly one of --sample or --image")

    if use_autoshot:
        model = load_unet(project.require_model("autoshot"))
        image = (load_image(image_path) if image_path
                 else load_image(project.sample_dir(sample_id) / "image.png"))
        logits = predict_unet(model, image)
    else:
        gen = project.require_generator()
        sel = project.layer_selection()
        image = load_image(image_path) if image_path else None
        image, logits = _predict_fewshot(project, gen, sel, image=image,
                                         sample_id=sample_id, steps=steps)

    mask = logits_to_mask(logits, class_names=project.class_names)
    outdir = Path(out) if out else project.reports_dir / "predict"
    outdir.mkdir(parents=True, exist_ok=True)
    stem = f"sample{sample_id:04d}" if sample_id is not None else Path(image_path).stem
    save_annotation(mask, outdir / f"{stem}_mask.png")
    save_prediction_panel(image, mask.labels, outdir / f"{stem}_panel.png",
                          n_classes=project.n_classes)
    click.echo(f"prediction written to {outdir}/{stem}_mask.png")


@main.command("gen-distill")
@click.option("--n", default=None, type=int)
@click.option("--seed", default=None, type=int)
@click.pass_context
@handle_errors
def gen_distill(ctx, n, seed):
    """Generate the pseudo-labeled distillation dataset from the teacher."""
    project = _load_project(ctx.obj["project_path"])
    gen = project.require_generator()
    sel = project.layer_selection()
    model = load_segmenter(project.require_model("fewshot"))
    n = n or int(project.config["distill"].get("n", 500))
    seed = project.seed if seed is None else seed
    _, manifest = generate_distilled_dataset(gen, model, sel, n, rng_seed=seed,
                                             out_dir=project.distill_dir,
                                             target_res=project.target_res())
    click.echo(f"distilled {n} samples -> {manifest}")


@main.command("train-autoshot")
@click.option("--target-mode", type=click.Choice(["logits", "one_hot"]),
              default="logits", show_default=True)
@click.option("--epochs", default=None, type=int)
@click.option("--seed", default=None, type=int)
@click.pass_context
@handle_errors
def train_autoshot_cmd(ctx, target_mode, epochs, seed):
    """Train the auto-shot UNet on the distilled dataset."""
    project = _load_project(ctx.obj["project_path"])
    manifest = project.distill_dir / "manifest.jsonl"
    if not manifest.exists():
        raise ProjectError("missing artifact: distilled dataset; run gen-distill "
                           "first", artifact="distilled dataset")
    dataset = load_distilled_dataset(project.distill_dir)
    overrides = {"target_mode": target_mode}
    if epochs is not None:
        overrides["epochs"] = epochs
    if seed is not None:
        overrides["rng_seed"] = seed
    cfg = project.autoshot_config(**overrides)
    aug = project.augmentation_config()
    model = build_unet(UNetSpec(n_classes=project.n_classes), rng_seed=cfg.rng_seed)

    def progress(rec):
        click.echo(f"  epoch {rec['epoch']}: train={rec['train_loss']:.4f} "
                   f"val={rec['val_loss']:.4f} lr={rec['lr']:.2e}")

    model, trace = train_autoshot(model, dataset, aug, cfg, progress=progress)
    path = project.model_path("autoshot")
    save_unet(model, path)
    write_csv(project.reports_dir / "autoshot_train.csv", trace)
    save_loss_curve(trace, project.reports_dir / "autoshot_train.png",
                    f"auto-shot ({target_mode})")
    click.echo(f"trained auto-shot UNet -> {path}")


@main.command("train-supervised")
@click.option("--labels", "n_labels", required=True, type=int,
              help="Number of ground-truth training masks.")
@click.option("--epochs", default=None, type=int)
@click.option("--seed", default=None, type=int)
@click.pass_context
@handle_errors
def train_supervised(ctx, n_labels, epochs, seed):
    """Train the supervised baseline UNet on N ground-truth masks."""
    project = _load_project(ctx.obj["project_path"])
    images, annotations, split = project.require_dataset()
    train_ids = split["train"] if split else list(range(len(images)))
    if n_labels < 1 or n_labels > len(train_ids):
        raise ProjectError(f"--labels must be in [1, {len(train_ids)}]")
    chosen = train_ids[:n_labels]
    pairs = [(images[i], annotations[i]) for i in chosen]
    overrides = {}
    if epochs is not None:
        overrides["epochs"] = epochs
    if seed is not None:
        overrides["rng_seed"] = seed
    cfg = project.autoshot_config(**overrides)
    aug = project.augmentation_config()
    model = build_unet(UNetSpec(n_classes=project.n_classes), rng_seed=cfg.rng_seed)
    model, trace = train_supervised_baseline(model, pairs, cfg, aug)
    path = project.model_path(f"supervised_{n_labels}")
    save_unet(model, path)
    write_csv(project.reports_dir / f"supervised_{n_labels}_train.csv", trace)
    click.echo(f"trained supervised baseline on {n_labels} labels -> {path}")


@main.command("eval")
@click.option("--model", "model_name", default="fewshot", show_default=True,
              help="fewshot | autoshot | supervised_<N>")
@click.option("--exclude-background", is_flag=True, default=False)
@click.option("--max-images", default=50, show_default=True)
@click.option("--steps", default=None, type=int, help="Inversion budget (fewshot).")
@click.pass_context
@handle_errors
def eval_cmd(ctx, model_name, exclude_background, max_images, steps):
    """Evaluate a model on the dataset's test split; writes report + figures."""
    project = _load_project(ctx.obj["project_path"])
    images, annotations, split = project.require_dataset()
    test_ids = (split["test"] if split else list(range(len(images))))[:max_images]
    project.require_model(model_name)

    preds = []
    gts = [annotations[i] for i in test_ids]
    if model_name == "fewshot":
        gen = project.require_generator()
        sel = project.layer_selection()
        seg = load_segmenter(project.model_path(model_name))
        cfg = project.inversion_config(**({} if steps is None else {"steps": steps}))
        for i in test_ids:
            rep, _ = represent_image(gen, images[i], sel, cfg,
                                     target_res=project.target_res())
            logits = upsample_logits(predict(seg, rep), images[i].shape[:2])
            preds.append(logits_to_mask(logits))
    else:
        unet = load_unet(project.model_path(model_name))
        for i in test_ids:
            preds.append(logits_to_mask(predict_unet(unet, images[i])))

    exclude = (0,) if exclude_background else ()
    report = evaluate_set(preds, gts, exclude=exclude)
    outdir = project.reports_dir / f"eval_{model_name}"
    save_iou_report(report, outdir, class_names=project.class_names)
    i = test_ids[0]
    save_prediction_panel(images[i], preds[0].labels, outdir / "example.png",
                          gt_labels=gts[0].labels, n_classes=project.n_classes)

    if model_name.startswith("supervised_"):
        n_labels = int(model_name.split("_")[1])
        eff_csv = project.reports_dir / "label_efficiency.csv"
        rows = []
        if eff_csv.exists():
            import csv as _csv
            with open(eff_csv) as f:
                rows = [r for r in _csv.DictReader(f)]
        rows = [r for r in rows if int(r["n_labels"]) != n_labels]
        rows.append({"n_labels": n_labels, "weighted_iou": f"{report.weighted:.6f}"})
        rows.sort(key=lambda r: int(r["n_labels"]))
        write_csv(eff_csv, rows, fieldnames=["n_labels", "weighted_iou"])
        save_label_efficiency_curve(
            [(int(r["n_labels"]), float(r["weighted_iou"])) for r in rows],
            project.reports_dir / "label_efficiency.png")

    click.echo(f"weighted IOU = {report.weighted:.4f} (report in {outdir})")


@main.command()
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--ui", "ui_dir", default=None, type=click.Path(exists=True),
              help="Static directory with the annotation UI (mounted at /ui).")
@click.pass_context
@handle_errors
def serve(ctx, port, host, ui_dir):
    """Run the annotation/training HTTP service."""
    import uvicorn

    from .service import create_app
    project = _load_project(ctx.obj["project_path"])
    app = create_app(project, static_dir=ui_dir)
    click.echo(f"serving on http://{host}:{port}")
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
