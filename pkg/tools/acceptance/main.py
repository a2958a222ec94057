#!/usr/bin/env python3
"""
Acceptance Experiments Tool
Slow end-to-end checks on phantom data: desk-scale learnability, the ablation
trend, Grad-CAM localization and run-to-run determinism.
"""

import argparse
import json
import sys
import tempfile
from pathlib import Path
from typing import Dict, Optional

from rich.console import Console
from rich.table import Table

sys.path.insert(0, str(Path(__file__).resolve().parents[2] / "src"))

from trusfuse.ablation import run_ablation
from trusfuse.cam import grad_cam, localization_score
from trusfuse.config import AblationConfig, RunConfigDocument, load_run_config, override, override_document, variant_configs
from trusfuse.errors import TrusError
from trusfuse.metrics import evaluate
from trusfuse.network import checkpoint_digest
from trusfuse.phantom import generate_dataset
from trusfuse.trainer import FINAL_CHECKPOINT, train
from trusfuse.videodata import SampleStore, split_manifest

DESK_CONFIG = Path(__file__).resolve().parents[2] / "configs" / "desk.json"

LEARNABILITY_AUC = 0.95
DUAL_MARGIN = 0.10
CONCAT_TIE = 0.02
CAM_HIT_RATE = 0.70
AUC_REPEAT_TOL = 1e-6


class AcceptanceRunner:
    def __init__(self, workdir: Path, config: Optional[Path] = None):
        self.console = Console()
        self.workdir = workdir
        self.document = load_run_config(config or DESK_CONFIG)
        self.results: Dict[str, Dict] = {}

    def dataset(self, name: str, distractor_rate: float):
        out_dir = self.workdir / name
        phantom = override(self.document.phantom, n_samples=160, dims=(16, 32, 32, 1),
                           distractor_rate=distractor_rate)
        return generate_dataset(phantom, out_dir)

    def train_full_variant(self, run_name: str):
        manifest = self.dataset("phantom_desk", 0.5)
        train_set, test_set = split_manifest(manifest, 0.25, self.document.data.split_seed)
        network, training = variant_configs(self.document, "fusion_or")
        network = override(network, width_multiplier=0.25)
        training = override(training, epochs=30, ortho_lambda=1e-5)
        run_dir = self.workdir / run_name
        model, _ = train(network, training, train_set, run_dir)
        report = evaluate(model, test_set, run_dir / "eval")
        return model, report, test_set, run_dir

    def learnability(self):
        model, report, test_set, run_dir = self.train_full_variant("learnability")
        self.record("learnability", report.auc >= LEARNABILITY_AUC, auc=report.auc)
        return model, report, test_set, run_dir

    def cam_hits(self, model=None, test_set=None):
        if model is None:
            model, _, test_set, _ = self.train_full_variant("learnability")
        store = SampleStore(test_set)
        positives = [e.id for e in test_set.entries if e.label == 1]
        hits = 0
        for sample_id in positives:
            sample = store.get(sample_id)
            heat = grad_cam(model, sample, target_class=1)
            hits += localization_score(heat, sample.lesion_mask, 0.1).hit
        rate = hits / len(positives)
        self.record("cam_localization", rate >= CAM_HIT_RATE, hit_rate=rate, positives=len(positives))

    def determinism(self, first_auc: Optional[float] = None, first_dir: Optional[Path] = None):
        if first_auc is None:
            _, report, _, first_dir = self.train_full_variant("learnability")
            first_auc = report.auc
        _, repeat, _, repeat_dir = self.train_full_variant("learnability_repeat")
        same_digest = checkpoint_digest(first_dir / FINAL_CHECKPOINT) == checkpoint_digest(repeat_dir / FINAL_CHECKPOINT)
        delta = abs(repeat.auc - first_auc)
        self.record("determinism", delta <= AUC_REPEAT_TOL and same_digest, auc_delta=delta, same_digest=same_digest)

    def ablation_trend(self):
        manifest = self.dataset("phantom_conjunction", 1.0)
        document: RunConfigDocument = override_document(
            self.document,
            ablation=AblationConfig(seeds=[0, 1, 2]),
            network=override(self.document.network, width_multiplier=0.25),
            training=override(self.document.training, epochs=30),
        )
        result = run_ablation(document, manifest, self.workdir / "ablation")
        summary = result.summary()
        auc = {variant: row["auc"] for variant, row in summary.items()}
        if result.failures or any(v is None for v in auc.values()):
            self.record("ablation_trend", False, failures=len(result.failures))
            return
        single = max(auc["bmode"], auc["swe"])
        dual = min(auc["concat"], auc["fusion"], auc["fusion_or"])
        passed = single <= dual - DUAL_MARGIN and auc["fusion"] >= auc["concat"] - CONCAT_TIE
        self.record("ablation_trend", passed, **auc)

    def record(self, name: str, passed: bool, **values):
        self.results[name] = {"passed": bool(passed), **values}
        mark = "[green]✅" if passed else "[red]❌"
        self.console.print(f"{mark} {name}: {values}[/]")

    def display(self):
        table = Table(title="Acceptance experiments")
        table.add_column("Experiment", style="cyan")
        table.add_column("Result")
        table.add_column("Values", style="yellow")
        for name, result in self.results.items():
            values = {k: v for k, v in result.items() if k != "passed"}
            table.add_row(name, "[green]pass[/green]" if result["passed"] else "[red]fail[/red]", json.dumps(values))
        self.console.print(table)

    def run(self, args) -> int:
        try:
            if args.experiment in ("learnability", "cam", "determinism", "all"):
                model, report, test_set, run_dir = self.learnability()
                if args.experiment in ("cam", "all"):
                    self.cam_hits(model, test_set)
                if args.experiment in ("determinism", "all"):
                    self.determinism(report.auc, run_dir)
            if args.experiment in ("ablation", "all"):
                self.ablation_trend()
        except TrusError as e:
            self.console.print(f"[red]❌ {e}[/red]")
            return e.exit_code
        except KeyboardInterrupt:
            self.console.print("\n[yellow]Operation cancelled by user.[/yellow]")
            return 1
        self.display()
        if args.export:
            Path(args.export).write_text(json.dumps(self.results, indent=2))
        return 0 if all(r["passed"] for r in self.results.values()) else 1


def main():
    """Main entry point."""
    parser = argparse.ArgumentParser(
        description="TrusFuse acceptance experiments",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Learnability of the full variant (width 0.25, 30 epochs)
  python main.py learnability

  # Everything, keeping the run directories
  python main.py all --workdir runs/acceptance --export acceptance.json
        """
    )
    parser.add_argument('experiment', choices=['learnability', 'cam', 'determinism', 'ablation', 'all'])
    parser.add_argument('--workdir', help='Directory for data and runs (default: a temporary directory)')
    parser.add_argument('--config', help='Run config document (default: configs/desk.json)')
    parser.add_argument('--export', metavar='FILENAME', help='Write the results as JSON')

    args = parser.parse_args()

    if args.workdir:
        runner = AcceptanceRunner(Path(args.workdir), args.config)
        return runner.run(args)
    with tempfile.TemporaryDirectory() as tmp:
        return AcceptanceRunner(Path(tmp), args.config).run(args)


if __name__ == "__main__":
    sys.exit(main())
