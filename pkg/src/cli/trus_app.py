#!/usr/bin/env python3
"""
TrusFuse CLI - phantom data, training, evaluation, ablation and Grad-CAM export.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

import functools
import json
import sys
from pathlib import Path
from typing import Optional

import click
import typer
from loguru import logger
from rich.console import Console
from rich.markup import escape
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from trusfuse.ablation import AblationResult, VariantRun, best_per_column, run_ablation
from trusfuse.cam import HEAT_FILE, export_frames, export_heat, grad_cam, localization_score, overlay
from trusfuse.config import (
    CamConfig,
    RunConfigDocument,
    default_data_root,
    load_run_config,
    override,
    override_document,
    variant_configs,
)
from trusfuse.errors import ConfigError, DataError, TrusError, exit_code_for
from trusfuse.metrics import EvalReport, evaluate
from trusfuse.network import load_checkpoint
from trusfuse.phantom import MANIFEST_NAME, generate_dataset
from trusfuse.trainer import FINAL_CHECKPOINT, EpochRecord, train, write_resolved_config
from trusfuse.videodata import DatasetManifest, SampleStore, load_manifest, load_sample, split_manifest

from .logger import setup_logging

SPLIT_FILE = "split.json"

console = Console()
app = typer.Typer(help="TrusFuse - dual-stream B-mode/SWE classification pipeline", no_args_is_help=True)


def guarded(command):
    """Turn library errors into a one-line diagnostic and the matching exit code."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except TrusError as e:
            console.print(f"[red]❌ {escape(str(e))}[/red]")
            raise typer.Exit(code=e.exit_code)
        except (click.exceptions.Exit, click.ClickException, click.exceptions.Abort):
            raise
        except Exception as e:
            logger.exception(f"{command.__name__} failed")
            console.print(f"[red]❌ {escape(type(e).__name__)}: {escape(str(e))}[/red]")
            raise typer.Exit(code=exit_code_for(e))

    return wrapper


class PipelineManager:
    def __init__(self):
        self.console = Console()

    def data_dir(self, data_dir: Optional[Path]) -> Path:
        data_dir = data_dir or default_data_root()
        if data_dir is None:
            raise ConfigError("No data directory given and TRUSFUSE_DATA_ROOT is not set")
        return Path(data_dir)

    def manifest(self, data_dir: Optional[Path]) -> DatasetManifest:
        return load_manifest(self.data_dir(data_dir) / MANIFEST_NAME)

    def gen_data(self, document: RunConfigDocument, out_dir: Path) -> Path:
        manifest = generate_dataset(document.phantom, out_dir)
        write_resolved_config(out_dir, document.resolved())
        self.display_dataset(manifest, out_dir)
        return out_dir / MANIFEST_NAME

    def train(self, document: RunConfigDocument, data_dir: Optional[Path], out_dir: Path,
              resume: Optional[Path] = None):
        network_config, train_config = variant_configs(document)
        manifest = self.manifest(data_dir)
        train_set, test_set = split_manifest(manifest, document.data.test_fraction, document.data.split_seed)
        resolved = document.resolved()
        resolved.update(network=network_config.model_dump(mode="json"),
                        training=train_config.model_dump(mode="json"))

        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DataError(f"Cannot create output directory {out_dir}: {e}") from e
        self.write_split(out_dir, document, train_set, test_set)
        with self.progress() as progress:
            task = progress.add_task("training", total=train_config.epochs)

            def on_epoch(record: EpochRecord):
                progress.update(task, completed=record.epoch + 1,
                                description=f"epoch {record.epoch} loss {record.loss:.4f}")

            model, history = train(network_config, train_config, train_set, out_dir, resume_from=resume,
                                   input_dims=document.data.input_dims, resolved_config=resolved,
                                   cache_size=document.data.cache_size, on_epoch=on_epoch)
        self.console.print(
            f"[green]✅ Trained {network_config.layout} network for {len(history.records)} epoch(s); "
            f"checkpoint at {out_dir / FINAL_CHECKPOINT}[/green]"
        )
        return model, history

    def write_split(self, out_dir: Path, document: RunConfigDocument, train_set, test_set):
        payload = {
            "test_fraction": document.data.test_fraction,
            "split_seed": document.data.split_seed,
            "train": train_set.ids,
            "test": test_set.ids,
        }
        try:
            (out_dir / SPLIT_FILE).write_text(json.dumps(payload, indent=2))
        except OSError as e:
            raise DataError(f"Cannot write {out_dir / SPLIT_FILE}: {e}") from e

    def select_split(self, manifest: DatasetManifest, split_file: Optional[Path], split: str) -> DatasetManifest:
        if split_file is None:
            return manifest
        try:
            ids = json.loads(Path(split_file).read_text())[split]
        except (OSError, KeyError, json.JSONDecodeError) as e:
            raise DataError(f"Cannot read the '{split}' ids from {split_file}: {e}") from e
        missing = sorted(set(ids) - set(manifest.ids))
        if missing:
            raise DataError(f"Split ids not in the manifest: {', '.join(missing)}")
        return manifest.subset(ids, split)

    def evaluate(self, document: RunConfigDocument, checkpoint: Path, manifest: DatasetManifest,
                 out_dir: Path) -> EvalReport:
        model, _ = load_checkpoint(checkpoint)
        report = evaluate(model, manifest, out_dir, threshold=document.evaluation.threshold,
                          input_dims=document.data.input_dims, roc_plot=document.evaluation.roc_plot,
                          cache_size=document.data.cache_size)
        write_resolved_config(out_dir, document.resolved())
        self.display_report(report)
        return report

    def ablate(self, document: RunConfigDocument, data_dir: Optional[Path], out_dir: Path) -> AblationResult:
        manifest = self.manifest(data_dir)
        write_resolved_config(out_dir, document.resolved())

        def on_run(run: VariantRun):
            if run.ok:
                self.console.print(f"[green]✅ {run.variant} (seed {run.seed}): AUC {run.report.auc:.4f}[/green]")
            else:
                self.console.print(f"[red]❌ {run.variant} (seed {run.seed}): {escape(run.error)}[/red]")

        result = run_ablation(document, manifest, out_dir, on_run=on_run)
        self.display_ablation(result)
        return result

    def cam(self, document: RunConfigDocument, checkpoint: Path, sample_ref: str,
            manifest_path: Optional[Path], out_dir: Path):
        cam_config = document.cam
        model, _ = load_checkpoint(checkpoint)
        sample = self.load_cam_sample(sample_ref, manifest_path, document)
        heat = grad_cam(model, sample, cam_config.layer, cam_config.target_class)
        frames = overlay(sample, heat, cam_config.alpha)
        export_frames(frames, out_dir, animate=cam_config.animate, fps=cam_config.fps)
        export_heat(heat, out_dir / HEAT_FILE)

        verdict = None
        if sample.lesion_mask is not None and sample.lesion_mask.any():
            verdict = localization_score(heat, sample.lesion_mask, cam_config.dilation_fraction)
        payload = {
            "sample": sample.id,
            "layer": heat.target_layer,
            "target_class": heat.target_class,
            "frames": int(frames.shape[0]),
            "localization": None if verdict is None else {
                "hit": verdict.hit,
                "peak": list(verdict.peak),
                "distance": verdict.distance,
                "radius": verdict.radius,
                "degenerate": verdict.degenerate,
            },
        }
        try:
            (out_dir / "cam.json").write_text(json.dumps(payload, indent=2))
        except OSError as e:
            raise DataError(f"Cannot write {out_dir / 'cam.json'}: {e}") from e
        write_resolved_config(out_dir, document.resolved())

        self.console.print(f"[green]✅ Wrote {frames.shape[0]} overlay frames for {sample.id} ({heat.target_layer})[/green]")
        if verdict is not None:
            style = "green" if verdict.hit else "yellow"
            self.console.print(
                f"[{style}]Localization: {'hit' if verdict.hit else 'miss'} at peak {verdict.peak} "
                f"(distance {verdict.distance:.2f}, radius {verdict.radius:.2f})[/{style}]"
            )
        return payload

    def load_cam_sample(self, sample_ref: str, manifest_path: Optional[Path], document: RunConfigDocument):
        if manifest_path is None and default_data_root() is not None:
            candidate = default_data_root() / MANIFEST_NAME
            manifest_path = candidate if candidate.exists() else None
        if manifest_path is not None:
            manifest = load_manifest(manifest_path)
            if sample_ref in manifest.ids:
                return SampleStore(manifest, document.data.input_dims, max_items=0).get(sample_ref)
        path = Path(sample_ref)
        if not path.exists():
            raise DataError(f"Sample '{sample_ref}' is neither a manifest id nor an existing file")
        return load_sample(path)

    def progress(self) -> Progress:
        return Progress(
            TextColumn("{task.description}"),
            BarColumn(),
            TextColumn("{task.completed}/{task.total}"),
            TimeElapsedColumn(),
            console=self.console,
            transient=True,
        )

    def display_dataset(self, manifest: DatasetManifest, out_dir: Path):
        table = Table(title=f"Phantom dataset ({out_dir})")
        table.add_column("Samples", style="cyan")
        table.add_column("Positive", style="green")
        table.add_column("Negative", style="magenta")
        table.add_column("Master seed", style="yellow")
        table.add_row(
            str(len(manifest.entries)),
            str(manifest.label_counts["1"]),
            str(manifest.label_counts["0"]),
            str(manifest.master_seed),
        )
        self.console.print(table)

    def display_report(self, report: EvalReport):
        table = Table(title="Evaluation")
        table.add_column("AUC", style="cyan")
        table.add_column("F1", style="green")
        table.add_column("Acc", style="magenta")
        table.add_column("Samples", style="yellow")
        f1 = f"{report.f1:.4f}" + (" (0/0)" if report.f1_zero_denominator else "")
        table.add_row(f"{report.auc:.4f}", f1, f"{report.accuracy:.4f}", str(len(report.per_sample)))
        self.console.print(table)

    def display_ablation(self, result: AblationResult):
        summary = result.summary()
        best = best_per_column(summary)
        table = Table(title="Ablation (mean over seeds)")
        table.add_column("Variant", style="cyan")
        for name in ("AUC", "F1", "Acc"):
            table.add_column(name)
        for variant, row in summary.items():
            cells = []
            for metric in ("auc", "f1", "accuracy"):
                value = row[metric]
                if value is None:
                    cells.append("[red]failed[/red]")
                elif variant in best[metric]:
                    cells.append(f"[bold]{value:.4f}[/bold]")
                else:
                    cells.append(f"{value:.4f}")
            table.add_row(variant, *cells)
        self.console.print(table)


pipeline = PipelineManager()


def _document(config: Optional[Path], variant: Optional[str] = None) -> RunConfigDocument:
    document = load_run_config(config)
    return override_document(document, variant=variant)


@app.callback()
def _configure(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Also log to the console"),
    log_dir: Optional[Path] = typer.Option(None, "--log-dir", help="Log directory (default ./.logs or $TRUSFUSE_LOG_DIR)"),
):
    setup_logging(log_dir, verbose)


@app.command("gen-data")
@guarded
def gen_data(
    out_dir: Path = typer.Argument(..., help="Directory for the samples and manifest.json"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Run config document (JSON)"),
    n_samples: Optional[int] = typer.Option(None, "--n-samples", help="Override phantom.n_samples"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override phantom.master_seed"),
    distractor_rate: Optional[float] = typer.Option(None, "--distractor-rate", help="Override phantom.distractor_rate"),
):
    """Generate a seeded phantom dataset."""
    document = _document(config)
    phantom = override(document.phantom, n_samples=n_samples, master_seed=seed, distractor_rate=distractor_rate)
    manifest_path = pipeline.gen_data(override_document(document, phantom=phantom), out_dir)
    console.print(f"[green]✅ Manifest written to {manifest_path}[/green]")


@app.command("train")
@guarded
def train_cmd(
    out_dir: Path = typer.Argument(..., help="Run directory (checkpoint, history, resolved config)"),
    data_dir: Optional[Path] = typer.Option(None, "--data", "-d", help="Data directory (default $TRUSFUSE_DATA_ROOT)"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Run config document (JSON)"),
    variant: Optional[str] = typer.Option(None, "--variant", help="bmode, swe, concat, fusion or fusion_or"),
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Override training.epochs"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override training.init_seed and shuffle_seed"),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Checkpoint directory to continue from"),
):
    """Train one variant on the train split of a dataset."""
    document = _document(config, variant)
    training = override(document.training, epochs=epochs, init_seed=seed, shuffle_seed=seed)
    pipeline.train(override_document(document, training=training), data_dir, out_dir, resume)


@app.command("eval")
@guarded
def eval_cmd(
    checkpoint: Path = typer.Argument(..., help="Checkpoint directory"),
    out_dir: Path = typer.Argument(..., help="Directory for report.json and roc.csv"),
    manifest: Optional[Path] = typer.Option(None, "--manifest", "-m", help="Manifest (default $TRUSFUSE_DATA_ROOT/manifest.json)"),
    split_file: Optional[Path] = typer.Option(None, "--split-file", help="split.json written by train"),
    split: str = typer.Option("test", "--split", help="Which ids of --split-file to evaluate"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Run config document (JSON)"),
    threshold: Optional[float] = typer.Option(None, "--threshold", help="Override evaluation.threshold"),
):
    """Evaluate a checkpoint: AUC, F1, accuracy and the ROC curve."""
    if split not in ("train", "test"):
        raise ConfigError(f"--split must be 'train' or 'test', got '{split}'")
    if not (Path(checkpoint) / "checkpoint.json").exists():
        raise DataError(f"No checkpoint at {checkpoint}")
    document = _document(config)
    document = override_document(document, evaluation=override(document.evaluation, threshold=threshold))
    manifest_path = manifest or pipeline.data_dir(None) / MANIFEST_NAME
    selected = pipeline.select_split(load_manifest(manifest_path), split_file, split)
    pipeline.evaluate(document, checkpoint, selected, out_dir)


@app.command("ablate")
@guarded
def ablate(
    out_dir: Path = typer.Argument(..., help="Directory for per-variant runs and the comparison table"),
    data_dir: Optional[Path] = typer.Option(None, "--data", "-d", help="Data directory (default $TRUSFUSE_DATA_ROOT)"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Run config document (JSON)"),
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Override training.epochs"),
):
    """Train and evaluate every variant with shared seeds and splits."""
    document = _document(config)
    document = override_document(document, training=override(document.training, epochs=epochs))
    result = pipeline.ablate(document, data_dir, out_dir)
    if result.failures:
        console.print(f"[red]❌ {len(result.failures)} variant run(s) failed[/red]")
        raise typer.Exit(code=result.failures[0].exit_code)


@app.command("cam")
@guarded
def cam_cmd(
    checkpoint: Path = typer.Argument(..., help="Checkpoint directory"),
    sample: str = typer.Argument(..., help="Sample id (with --manifest) or sample path"),
    out_dir: Path = typer.Argument(..., help="Directory for frames, heat volume and verdict"),
    manifest: Optional[Path] = typer.Option(None, "--manifest", "-m", help="Manifest to resolve sample ids"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Run config document (JSON)"),
    layer: Optional[str] = typer.Option(None, "--layer", help="Target layer id, e.g. fused.stage4"),
    target_class: Optional[int] = typer.Option(None, "--class", help="1 = csPCa, 0 = non-csPCa"),
    alpha: Optional[float] = typer.Option(None, "--alpha", help="Overlay opacity in [0, 1]"),
    animate: bool = typer.Option(False, "--animate", help="Also write overlay.avi"),
):
    """Grad-CAM heat maps over B-mode frames."""
    document = _document(config)
    cam_config: CamConfig = override(document.cam, layer=layer, target_class=target_class, alpha=alpha,
                                     animate=animate or None)
    pipeline.cam(override_document(document, cam=cam_config), checkpoint, sample, manifest, out_dir)


def main(argv=None):
    """Main entry point."""
    try:
        rv = app(args=argv, standalone_mode=False)
    except click.ClickException as e:
        e.show()
        sys.exit(1)
    except click.exceptions.Abort:
        console.print("[red]❌ Aborted[/red]")
        sys.exit(1)
    sys.exit(rv if isinstance(rv, int) else 0)


if __name__ == "__main__":
    main()
