"""Command-line front door: data generation, scripted experiments, reports,
prototype rendering, and the debugging service."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import experiment as X
from . import persistence, shapes
from .session import SessionConfig


def _fail(message, code=1):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_session_config(config_path) -> SessionConfig:
    if config_path is None:
        return SessionConfig()
    data = json.loads(Path(config_path).read_text())
    return SessionConfig.from_json(data)


@click.group()
def main():
    """Prototype-concept gray-box classifier and its debugging loop."""


@main.command("gen-data")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--classes", type=int, default=5, show_default=True)
@click.option("--per-class", type=int, default=50, show_default=True,
              help="training images per class")
@click.option("--test-per-class", type=int, default=20, show_default=True)
@click.option("--validation-per-class", type=int, default=0, show_default=True)
@click.option("--image-size", type=int, default=64, show_default=True)
@click.option("--confounded-class", type=int, default=0, show_default=True)
def gen_data(seed, out, classes, per_class, test_per_class, validation_per_class,
             image_size, confounded_class):
    """Generate the confounded shapes dataset into --out."""
    config = shapes.DataConfig(
        seed=seed, v=classes, n_train=per_class, n_test=test_per_class,
        n_validation=validation_per_class, image_size=image_size,
        confounded_class=confounded_class)
    try:
        dataset = shapes.generate(config)
    except shapes.GenerationError as exc:
        _fail(str(exc), code=2)
    shapes.save_dataset(dataset, out)
    click.echo(f"dataset written to {out}")
    click.echo(f"formulas: {[str(f) for f in dataset.formulas]}")
    click.echo(f"manifest hash: {dataset.manifest['hash']}")


@main.command("experiment")
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--condition", type=click.Choice(X.CONDITIONS), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON session config override")
def run_experiment_cmd(data, seed, condition, out, config_path):
    """Train, apply scripted-oracle feedback, refine; write summary + panels."""
    dataset = shapes.load_dataset(data)
    config = _load_session_config(config_path)
    try:
        summary = X.run_experiment(dataset, seed=seed, condition=condition,
                                   out_dir=out, config=config, dataset_dir=data)
    except Exception as exc:
        _fail(f"experiment failed: {exc}")
    click.echo(json.dumps(
        {k: summary[k] for k in ("condition", "seed", "confound_reliance_initial",
                                 "confound_reliance_final", "test_accuracy")},
        indent=2))
    click.echo(f"summary written to {Path(out) / 'summary.json'}")


@main.command("report")
@click.option("--runs", "run_dirs", type=click.Path(exists=True), multiple=True,
              required=True)
@click.option("--out", type=click.Path(), required=True)
def report_cmd(run_dirs, out):
    """Aggregate experiment summaries into a Markdown comparison."""
    try:
        X.write_report(run_dirs, out)
    except FileNotFoundError as exc:
        _fail(str(exc), code=2)
    click.echo(f"report written to {out}")


@main.command("render-prototypes")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True)
def render_prototypes_cmd(checkpoint, data, out):
    """Render per-concept panels (prototype, nearest patch, attribution)."""
    try:
        model = persistence.load_checkpoint(checkpoint)
    except persistence.CheckpointError as exc:
        _fail(str(exc), code=2)
    dataset = shapes.load_dataset(data)
    names = X.write_panels(model, dataset, out)
    click.echo(f"{len(names)} panels written to {out}")


@main.command("serve")
@click.option("--port", type=int, default=8321, show_default=True)
@click.option("--data-root", type=click.Path(exists=True), required=True)
def serve_cmd(port, data_root):
    """Host the debugging service (and the console UI if built)."""
    from .service import serve

    click.echo(f"serving on http://127.0.0.1:{port}")
    serve(port, data_root)


if __name__ == "__main__":
    main()
