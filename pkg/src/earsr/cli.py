"""Single entry point exposing the pipeline as subcommands.

Every run writes an isolated run directory containing ``config.json``
(the effective configuration), the stage outputs, and on failure an
``error.json`` record. Partial outputs land under ``*.tmp`` and are
renamed only on success. The output root defaults to ``$EARSR_RUN_DIR``
or ``./runs``.
"""

from __future__ import annotations

import json
import sys
import time
import warnings
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import bayes, imaging, metrics, patchwork, phantom, training
from .errors import (
    ConstantImageWarning,
    EarsrError,
    EmptyForeground,
    PatchTooLarge,
    SetMismatch,
)
from .networks import DiscriminatorConfig, GeneratorConfig, derive_seed, load_checkpoint
from .rating import StudyStore, analyze, create_study
from .rating.study import write_report

DEFAULTS = {
    "lambda_rec": 10.0,
    "lambda_adv": 1.0,
    "batch_size": 5,
    "learning_rate": 1e-4,
    "epochs": 50,
    "patch_size": 256,
    "stride": 128,
    "mc_passes": 100,
    "dropout_rate": 0.5,
    "roi_threshold": 0.2,
    "roi_margin": 8,
    "max_dim": 16384,
}


def _resolve_run_dir(out: str | None, command: str) -> Path:
    if out:
        return Path(out)
    import os

    root = Path(os.environ.get("EARSR_RUN_DIR", "runs"))
    return root / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"


def _start_run(ctx: click.Context, out: str | None) -> Path:
    run_dir = _resolve_run_dir(out, ctx.command.name)
    run_dir.mkdir(parents=True, exist_ok=True)
    config = {k: v for k, v in ctx.params.items()}
    (run_dir / "config.json").write_text(json.dumps(config, indent=2, default=str))
    return run_dir


def _fail(run_dir: Path, exc: Exception):
    record = {"error": type(exc).__name__, "message": str(exc)}
    (run_dir / "error.json").write_text(json.dumps(record, indent=2))
    click.echo(f"error: {record['error']}: {record['message']}", err=True)
    sys.exit(2)


def _finish_stage(tmp: Path, final: Path):
    if final.exists():
        raise click.ClickException(f"refusing to overwrite {final}")
    tmp.replace(final)


@click.group()
def main():
    """Unpaired super-resolution pipeline with uncertainty and rating tools."""


@main.command()
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True), help="Input volume directory.")
@click.option("--out", default=None, help="Run directory (default: $EARSR_RUN_DIR/<stage>-<time>).")
@click.option("--target-voxel-mm", default=0.018, show_default=True, help="Target in-plane pixel pitch.")
@click.option("--roi-threshold", default=DEFAULTS["roi_threshold"], show_default=True, help="Foreground threshold after normalization.")
@click.option("--roi-margin", default=DEFAULTS["roi_margin"], show_default=True, help="ROI margin in pixels.")
@click.option("--max-dim", default=DEFAULTS["max_dim"], show_default=True, help="Cap on any resampled axis.")
@click.option("--patch-size", default=DEFAULTS["patch_size"], show_default=True)
@click.option("--stride", default=DEFAULTS["stride"], show_default=True)
@click.pass_context
def preprocess(ctx, in_dir, out, target_voxel_mm, roi_threshold, roi_margin, max_dim, patch_size, stride):
    """Resample, normalize, ROI-crop a volume and cut training patches."""
    run_dir = _start_run(ctx, out)
    try:
        volume = imaging.load_volume(in_dir)
        tmp = run_dir / "patches.tmp"
        tmp.mkdir(parents=True, exist_ok=True)
        kept = skipped = 0
        for z in range(volume.data.shape[0]):
            s = volume.slice_at(z)
            s = imaging.bicubic_resample(s, (target_voxel_mm, target_voxel_mm), max_dim=max_dim)
            with warnings.catch_warnings():
                warnings.simplefilter("error", ConstantImageWarning)
                try:
                    s = imaging.zscore_then_unit_normalize(s)
                    s, _ = imaging.crop_roi(s, roi_threshold, roi_margin)
                    patches, grid = patchwork.extract_patches(s, patch_size, stride)
                except (ConstantImageWarning, EmptyForeground, PatchTooLarge) as reason:
                    click.echo(f"slice {z}: skipped ({reason})", err=True)
                    skipped += 1
                    continue
            patchwork.save_patches(patches, grid, tmp / f"slice_{z:03d}", s.pixel_size_mm)
            kept += 1
        _finish_stage(tmp, run_dir / "patches")
        click.echo(f"kept {kept} slices, skipped {skipped}; patches in {run_dir / 'patches'}")
    except EarsrError as exc:
        _fail(run_dir, exc)


@main.command("phantom")
@click.option("--spec", "spec_path", default=None, type=click.Path(exists=True), help="PhantomSpec JSON file.")
@click.option("--out", default=None)
@click.option("--n-lr", default=6, show_default=True, help="Unpaired LR slices.")
@click.option("--n-hr", default=6, show_default=True, help="Unpaired HR slices.")
@click.option("--n-val", default=3, show_default=True, help="Paired validation slices.")
@click.option("--canvas", default=512, show_default=True)
@click.option("--lr-factor", default=phantom.DEFAULT_LR_FACTOR, show_default=True)
@click.option("--noise-sigma", default=0.05, show_default=True)
@click.option("--blur-sigma", default=1.5, show_default=True)
@click.option("--patch-size", default=DEFAULTS["patch_size"], show_default=True)
@click.option("--stride", default=DEFAULTS["stride"], show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def phantom_cmd(ctx, spec_path, out, n_lr, n_hr, n_val, canvas, lr_factor, noise_sigma, blur_sigma, patch_size, stride, seed):
    """Generate synthetic phantom corpora: unpaired LR/HR patches plus paired validation."""
    run_dir = _start_run(ctx, out)
    try:
        if spec_path:
            raw = json.loads(Path(spec_path).read_text())
            shapes = [phantom.ShapeSpec(s["kind"], tuple(s["center"]), tuple(s["radii"]), s.get("intensity", 1.0))
                      for s in raw.pop("shapes", [])]
            spec = phantom.PhantomSpec(shapes=shapes, **raw)
        else:
            spec = phantom.PhantomSpec(canvas=canvas, lr_factor=lr_factor,
                                       lr_noise_sigma=noise_sigma, lr_blur_sigma=blur_sigma, seed=seed)
        tmp = run_dir / "data.tmp"
        phantom.generate_unpaired_corpus(spec, n_lr, n_hr, tmp / "lr_patches", tmp / "hr_patches",
                                         patch_size, stride)
        for k in range(n_val):
            sub = phantom.random_spec(spec, 40_000 + k)
            hr, lr = phantom.generate_pair(sub)
            imaging.save_slice(hr, tmp / "val" / f"pair_{k:02d}" / "hr")
            imaging.save_slice(lr, tmp / "val" / f"pair_{k:02d}" / "lr")
        _finish_stage(tmp, run_dir / "data")
        click.echo(f"phantom corpora in {run_dir / 'data'}")
    except EarsrError as exc:
        _fail(run_dir, exc)


@main.command()
@click.option("--lr-data", required=True, type=click.Path(exists=True), help="LR patch directory (tree).")
@click.option("--hr-data", required=True, type=click.Path(exists=True), help="HR patch directory (tree).")
@click.option("--out", default=None)
@click.option("--lambda-rec", default=DEFAULTS["lambda_rec"], show_default=True, help="Self-reconstruction weight.")
@click.option("--lambda-adv", default=DEFAULTS["lambda_adv"], show_default=True, help="Adversarial weight.")
@click.option("--batch-size", default=DEFAULTS["batch_size"], show_default=True)
@click.option("--learning-rate", default=DEFAULTS["learning_rate"], show_default=True)
@click.option("--epochs", default=DEFAULTS["epochs"], show_default=True)
@click.option("--max-steps", default=None, type=int, help="Cap on total steps (toy runs).")
@click.option("--checkpoint-every", default=200, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--base-width", default=64, show_default=True)
@click.option("--res-blocks", default=9, show_default=True, help="9 for 256-px patches, 6 for smaller.")
@click.option("--dropout-rate", default=DEFAULTS["dropout_rate"], show_default=True)
@click.option("--disc-width", default=64, show_default=True)
@click.option("--disc-layers", default=3, show_default=True)
@click.option("--dtype", default="float64", show_default=True, type=click.Choice(["float32", "float64"]))
@click.option("--non-saturating", is_flag=True, default=False, help="Use -log D(G(x)) generator term.")
@click.option("--resume", default=None, type=click.Path(exists=True), help="Checkpoint to resume from.")
@click.pass_context
def train(ctx, lr_data, hr_data, out, lambda_rec, lambda_adv, batch_size, learning_rate, epochs,
          max_steps, checkpoint_every, seed, base_width, res_blocks, dropout_rate,
          disc_width, disc_layers, dtype, non_saturating, resume):
    """Run cycle-consistency adversarial training on unpaired patch corpora."""
    run_dir = _start_run(ctx, out)
    try:
        cfg = training.TrainConfig(
            lambda_rec=lambda_rec, lambda_adv=lambda_adv, batch_size=batch_size,
            learning_rate=learning_rate, epochs=epochs, seed=seed,
            checkpoint_every=checkpoint_every, max_steps=max_steps,
            non_saturating=non_saturating, dtype=dtype,
            generator=GeneratorConfig(base_width=base_width, n_res_blocks=res_blocks,
                                      dropout_rate=dropout_rate),
            discriminator=DiscriminatorConfig(base_width=disc_width, n_layers=disc_layers),
        )
        stack_l = phantom.load_patch_tree(lr_data)
        stack_h = phantom.load_patch_tree(hr_data)
        _, reports = training.train(stack_l, stack_h, cfg, out_dir=run_dir, resume=resume)
        click.echo(f"{len(reports)} steps; checkpoint in {run_dir / 'checkpoint.zip'}")
    except EarsrError as exc:
        _fail(run_dir, exc)


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True), help="LR patch directory.")
@click.option("--out", default=None)
@click.option("--mc-passes", default=DEFAULTS["mc_passes"], show_default=True, help="Stochastic forward passes T.")
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def infer(ctx, checkpoint, in_dir, out, mc_passes, seed):
    """Monte Carlo dropout inference: posterior mean and uncertainty per patch."""
    run_dir = _start_run(ctx, out)
    try:
        bundle, manifest = load_checkpoint(checkpoint)
        patches, grid = patchwork.load_patches(in_dir)
        dropout_rate = bundle.g_l.cfg.dropout_rate
        mean_patches, var_patches = [], []
        for i, patch in enumerate(patches):
            result = bayes.mc_infer(bundle.g_l, patch, t=mc_passes, seed=derive_seed(seed, i))
            mean_patches.append(patchwork.Patch(np.clip(result.mean, 0.0, 1.0), patch.origin, patch.parent))
            var_patches.append(patchwork.Patch(bayes.uncertainty_map(result), patch.origin, patch.parent))
        tmp = run_dir / "inferred.tmp"
        patchwork.save_patches(mean_patches, grid, tmp / "mean")
        patchwork.save_patches(var_patches, grid, tmp / "variance")
        (tmp / "mc.json").write_text(json.dumps(
            {"T": mc_passes, "seed": seed, "dropout_rate": dropout_rate,
             "checkpoint_step": manifest.get("step")}))
        _finish_stage(tmp, run_dir / "inferred")
        click.echo(f"inference for {len(patches)} patches in {run_dir / 'inferred'}")
    except EarsrError as exc:
        _fail(run_dir, exc)


@main.command()
@click.option("--generated", required=True, type=click.Path(exists=True), help="Generated (mean) patch directory.")
@click.option("--lr", "lr_dir", required=True, type=click.Path(exists=True), help="Matching LR patch directory.")
@click.option("--out", default=None)
@click.option("--post/--no-post", default=True, show_default=True, help="Histogram match + median filter.")
@click.option("--median-kernel", default=3, show_default=True)
@click.option("--bins", default=256, show_default=True)
@click.pass_context
def reconstruct(ctx, generated, lr_dir, out, post, median_kernel, bins):
    """Stitch generated patches into a whole slice, suppressing the grid effect."""
    run_dir = _start_run(ctx, out)
    try:
        gen_patches, grid = patchwork.load_patches(generated)
        lr_patches, lr_grid = patchwork.load_patches(lr_dir)
        if lr_grid.origins != grid.origins:
            raise patchwork.GridMismatch("generated and LR grids disagree")
        result = patchwork.reconstruct_slice(gen_patches, lr_patches, grid, post=post,
                                             bins=bins, median_kernel=median_kernel)
        tmp = run_dir / "slice.tmp"
        tmp.mkdir(parents=True, exist_ok=True)
        imaging.save_slice(result, tmp / "reconstructed")
        _finish_stage(tmp, run_dir / "reconstruction")
        click.echo(f"slice in {run_dir / 'reconstruction'}")
    except EarsrError as exc:
        _fail(run_dir, exc)


def _load_slice_set(path: Path) -> list:
    files = sorted(p for p in Path(path).rglob("*.json") if not p.name.startswith("grid"))
    slices = []
    for sidecar in files:
        target = sidecar.with_suffix("")
        if target.exists():
            slices.append(imaging.load_slice(target))
    if not slices:
        raise EarsrError(f"no slice files under {path}")
    return slices


@main.command()
@click.option("--generated", required=True, type=click.Path(exists=True), help="Directory of generated slices.")
@click.option("--reference", required=True, type=click.Path(exists=True), help="Directory of reference slices.")
@click.option("--out", default=None)
@click.option("--distance-form", default="reciprocal-log", show_default=True,
              type=click.Choice(["reciprocal-log", "log"]))
@click.option("--binarize", is_flag=True, default=False, help="Threshold images at 0.5 before moments.")
@click.option("--pairwise-csv", is_flag=True, default=False, help="Also write the full distance matrix.")
@click.pass_context
def evaluate(ctx, generated, reference, out, distance_form, binarize, pairwise_csv):
    """Shape-similarity report: per-slice Hu vectors, per-slice minima, m-HuM."""
    run_dir = _start_run(ctx, out)
    try:
        gen = _load_slice_set(Path(generated))
        ref = _load_slice_set(Path(reference))
        result = metrics.m_hum(gen, ref, form=distance_form, binarize=binarize)
        report = {
            "v": 1,
            "n_generated": len(gen),
            "n_reference": len(ref),
            "hu_generated": [metrics.hu_moments(s, binarize).tolist() for s in gen],
            "hu_reference": [metrics.hu_moments(s, binarize).tolist() for s in ref],
            "per_slice_min": result.per_slice_min,
            "m_hum_minimum": result.minimum,
            "m_hum_mean_of_minima": result.mean_of_minima,
            "distance_form": distance_form,
        }
        tmp = run_dir / "report.json.tmp"
        tmp.write_text(json.dumps(report, indent=2))
        _finish_stage(tmp, run_dir / "report.json")
        if pairwise_csv:
            lines = []
            for g in gen:
                row = [f"{metrics.hum_distance(g, r, distance_form, binarize):.9g}" for r in ref]
                lines.append(",".join(row))
            (run_dir / "distances.csv").write_text("\n".join(lines) + "\n")
            report["pairwise_csv"] = str(run_dir / "distances.csv")
        click.echo(json.dumps({"m_hum_minimum": report["m_hum_minimum"],
                               "m_hum_mean_of_minima": report["m_hum_mean_of_minima"]}))
    except EarsrError as exc:
        _fail(run_dir, exc)


@main.command("rate-create")
@click.option("--studies-root", required=True, help="Directory holding study directories.")
@click.option("--study-id", required=True)
@click.option("--set", "sets", multiple=True, required=True,
              help="label=dir of candidate images; repeat exactly three times.")
@click.option("--lr", "lr_dir", required=True, type=click.Path(exists=True), help="LR reference images.")
@click.option("--raters", required=True, help="Comma-separated rater ids.")
@click.option("--seed", default=0, show_default=True)
@click.pass_context
def rate_create(ctx, studies_root, study_id, sets, lr_dir, raters, seed):
    """Create a blinded rating study from three labeled image sets."""
    run_dir = _start_run(ctx, Path(studies_root) / study_id)
    try:
        method_images = {}
        for item in sets:
            label, _, directory = item.partition("=")
            if not directory:
                raise SetMismatch(f"--set must look like label=dir, got {item!r}")
            method_images[label] = sorted(Path(directory).glob("*.png")) or sorted(
                p for p in Path(directory).iterdir() if p.is_file() and not p.suffix == ".json"
            )
        lr_images = sorted(Path(lr_dir).glob("*.png")) or sorted(
            p for p in Path(lr_dir).iterdir() if p.is_file() and not p.suffix == ".json"
        )
        store = create_study(run_dir, study_id, method_images, lr_images,
                             [r.strip() for r in raters.split(",") if r.strip()], seed)
        click.echo(json.dumps({"study_id": store.study_id,
                               "trials": len(store.trials),
                               "report_token": store.manifest["report_token"]}))
    except EarsrError as exc:
        _fail(run_dir, exc)


@main.command("rate-serve")
@click.option("--studies-root", required=True, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8420, show_default=True)
def rate_serve(studies_root, host, port):
    """Serve the blinded rating API over HTTP."""
    import uvicorn

    from .rating.service import create_app

    uvicorn.run(create_app(studies_root), host=host, port=port)


@main.command("rate-analyze")
@click.option("--study", required=True, type=click.Path(exists=True), help="Study directory.")
@click.option("--out", default=None)
@click.option("--anonymize", is_flag=True, default=False, help="Strip rater ids from the report.")
@click.pass_context
def rate_analyze(ctx, study, out, anonymize):
    """Unblind and analyze a study: distributions, Wilcoxon tests, raw CSV."""
    run_dir = _start_run(ctx, out)
    try:
        store = StudyStore(study)
        report = analyze(store, anonymize=anonymize)
        write_report(report, run_dir)
        click.echo(json.dumps({"completion_fraction": report["completion_fraction"],
                               "tests": len(report["wilcoxon"])}))
    except EarsrError as exc:
        _fail(run_dir, exc)


if __name__ == "__main__":
    main()
