"""Batch and developer command-line entry points.

Exit codes: 0 success, 2 invalid input, 3 out-of-bounds instruction,
4 missing checkpoint.
"""
from __future__ import annotations

import sys
from pathlib import Path

import click

from . import bench, imaging
from .geometry import OutOfBoundsError, load_depth_png
from .instructions import DIFFICULTIES, EditInstruction, OPS
from .pipeline import EditRequest, Editor
from .sampler import SamplerConfig

EXIT_INVALID_INPUT = 2
EXIT_OUT_OF_BOUNDS = 3
EXIT_MISSING_CHECKPOINT = 4


def _load_editor(checkpoint: str, cache_dir=None) -> Editor:
    from .backbone import load_checkpoint

    path = Path(checkpoint)
    if not path.exists():
        click.echo(f"checkpoint not found: {checkpoint}", err=True)
        sys.exit(EXIT_MISSING_CHECKPOINT)
    model, schedule, _meta = load_checkpoint(path)
    return Editor(model, schedule, cache_dir=cache_dir)


def _fail_invalid(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_INVALID_INPUT)


@click.group()
def main():
    """Geometric image editing: transform, inpaint, refine."""


@main.command("train-toy")
@click.option("--dataset-size", default=512, show_default=True, help="Procedural training images.")
@click.option("--resolution", default=64, show_default=True)
@click.option("--steps", default=4000, show_default=True, help="Optimizer steps.")
@click.option("--seed", default=0, show_default=True)
@click.option("--batch-size", default=16, show_default=True)
@click.option("--out", required=True, type=click.Path(), help="Checkpoint output path (.npz).")
def train_toy_cmd(dataset_size, resolution, steps, seed, batch_size, out):
    """Train the toy denoising backbone on procedural shapes."""
    from .backbone import (Denoiser, DenoiserConfig, NoiseSchedule, TrainConfig,
                           gen_shapes_dataset, save_checkpoint, train_toy)

    config = DenoiserConfig(resolution=resolution, seed=seed)
    model = Denoiser(config)
    schedule = NoiseSchedule.linear()
    dataset = gen_shapes_dataset(dataset_size, seed=seed, resolution=resolution)
    result = train_toy(model, schedule, dataset, steps=steps, seed=seed,
                       config=TrainConfig(batch_size=batch_size), progress=True)
    save_checkpoint(out, model, schedule,
                    extra={"train_steps": steps, "dataset_seed": seed, "dataset_size": dataset_size})
    tail = result.losses[-min(100, len(result.losses)):]
    click.echo(f"saved {out}; final loss {sum(tail) / len(tail):.4f}")


@main.command("gen-data")
@click.option("--n", default=32, show_default=True, help="Number of images.")
@click.option("--seed", default=0, show_default=True)
@click.option("--resolution", default=64, show_default=True)
@click.option("--no-depth", is_flag=True, help="Skip synthetic depth maps.")
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
def gen_data_cmd(n, seed, resolution, no_depth, out):
    """Write a procedural source-image directory (images, masks, depth, index)."""
    index = bench.build_source_dir(n, seed, out, resolution=resolution, with_depth=not no_depth)
    click.echo(f"wrote {len(index['records'])} records under {out}")


@main.command("gen-bench")
@click.option("--src", required=True, type=click.Path(exists=True), help="Source dir from gen-data.")
@click.option("--seed", default=0, show_default=True)
@click.option("--per-op", default=1, show_default=True, help="Instructions per (op, difficulty).")
@click.option("--out", default=None, type=click.Path(), help="Manifest path [default: <src>/manifest.json].")
def gen_bench_cmd(src, seed, per_op, out):
    """Generate difficulty-banded editing instructions with bounds filtering."""
    counts = dict.fromkeys(("move", "resize", "rotate2d", "rotate3d"), per_op)
    manifest = bench.build_manifest(src, seed=seed, per_op_counts=counts)
    out = out or str(Path(src) / "manifest.json")
    manifest.save(out)
    total = sum(len(r.instructions) for r in manifest.records)
    click.echo(f"wrote {out}: {len(manifest.records)} records, {total} instructions {manifest.counts}")


@main.command("edit")
@click.argument("image", type=click.Path(exists=True))
@click.option("--source-mask", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--op", type=click.Choice(OPS), required=True)
@click.option("--direction", required=True)
@click.option("--magnitude", type=float, required=True)
@click.option("--difficulty", type=click.Choice(DIFFICULTIES), default="medium", show_default=True)
@click.option("--completion-mask", type=click.Path(exists=True), default=None)
@click.option("--prompt", default=None, help="Object label steering refinement.")
@click.option("--depth", type=click.Path(exists=True), default=None, help="16-bit depth PNG (3D ops).")
@click.option("--depth-scale", type=float, default=1.0, show_default=True)
@click.option("--steps", default=50, show_default=True, help="Sampler steps (tau1).")
@click.option("--guidance-scale", default=7.5, show_default=True)
@click.option("--tau0", default=None, type=int,
              help="Override the refinement blend-start step [defaults: 13 with completion, 25 without].")
@click.option("--seed", default=0, show_default=True)
@click.option("--cache-dir", type=click.Path(), default=None, help="Inversion cache directory.")
@click.option("--out", required=True, type=click.Path(), help="Output directory for all artifacts.")
def edit_cmd(image, source_mask, checkpoint, op, direction, magnitude, difficulty,
             completion_mask, prompt, depth, depth_scale, steps, guidance_scale, tau0,
             seed, cache_dir, out):
    """Run the full three-step pipeline once and write every artifact."""
    editor = _load_editor(checkpoint, cache_dir=cache_dir)
    try:
        instr = EditInstruction(op=op, direction=direction, magnitude=magnitude, difficulty=difficulty)
    except ValueError as exc:
        _fail_invalid(str(exc))
    kwargs = {}
    if tau0 is not None:
        kwargs = {"refine_blend_start_completion": tau0, "refine_blend_start_general": tau0}
    try:
        config = SamplerConfig(steps=steps, guidance_scale=guidance_scale, seed=seed, **kwargs)
        request = EditRequest(
            image=imaging.load_png(image),
            source_mask=imaging.load_mask_png(source_mask),
            instruction=instr,
            completion_mask=imaging.load_mask_png(completion_mask) if completion_mask else None,
            depth=load_depth_png(depth, depth_scale) if depth else None,
            prompt=prompt,
            config=config,
        )
    except ValueError as exc:
        _fail_invalid(str(exc))
    try:
        result = editor.edit(request)
    except OutOfBoundsError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_OUT_OF_BOUNDS)
    result.save(out)
    click.echo(f"wrote artifacts to {out} "
               f"(durations: {', '.join(f'{k}={v:.1f}s' for k, v in result.durations.items())})")


@main.command("eval")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--steps", default=50, show_default=True)
@click.option("--guidance-scale", default=7.5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--embedder", type=click.Choice(("randproj", "backbone")), default="randproj",
              show_default=True)
@click.option("--md-provider", type=click.Choice(("ncc", "oracle")), default="ncc", show_default=True)
@click.option("--jobs", default=1, show_default=True, help="Parallel edit workers.")
@click.option("--cache-dir", type=click.Path(), default=None)
def eval_cmd(manifest, checkpoint, out, steps, guidance_scale, seed, embedder, md_provider, jobs, cache_dir):
    """Batch-evaluate a manifest: per-sample CSV plus corpus summary (resumable)."""
    from . import metrics as metrics_mod

    editor = _load_editor(checkpoint, cache_dir=cache_dir)
    config = SamplerConfig(steps=steps, guidance_scale=guidance_scale, seed=seed)
    emb = (metrics_mod.BackboneEmbedder(editor.model) if embedder == "backbone"
           else metrics_mod.RandomProjectionEmbedder())
    report = bench.run_eval(manifest, editor, out, config=config, embedder=emb,
                            md_provider=md_provider, jobs=jobs)
    click.echo(f"evaluated {len(report.per_sample)} samples -> {out}")
    for key, value in sorted(report.summary().items()):
        click.echo(f"  {key}: {value}")


@main.command("serve")
@click.option("--port", default=8000, show_default=True, envvar="GEOEDIT_PORT")
@click.option("--host", default="127.0.0.1", show_default=True, envvar="GEOEDIT_HOST")
@click.option("--checkpoint", required=True, type=click.Path(), envvar="GEOEDIT_CHECKPOINT")
@click.option("--data-dir", required=True, type=click.Path(), envvar="GEOEDIT_DATA_DIR")
@click.option("--workers", default=2, show_default=True, envvar="GEOEDIT_WORKERS")
@click.option("--steps", default=50, show_default=True, help="Sampler steps for service jobs.")
@click.option("--seed", default=0, show_default=True)
def serve_cmd(port, host, checkpoint, data_dir, workers, steps, seed):
    """Start the session service (and the UI, when frontend/dist exists)."""
    from .service import ServiceConfig, serve

    editor = _load_editor(checkpoint, cache_dir=Path(data_dir) / "cache")
    config = ServiceConfig(data_dir=Path(data_dir), workers=workers,
                           sampler_steps=steps, seed=seed)
    click.echo(f"serving on {host}:{port} (checkpoint {checkpoint})")
    serve(editor, config, port=port, host=host)


if __name__ == "__main__":
    main()
