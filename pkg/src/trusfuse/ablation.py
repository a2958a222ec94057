"""
Ablation sweep: train and evaluate every requested variant on shared splits and seeds.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
from loguru import logger

from .config import RunConfigDocument, override, variant_configs
from .errors import DataError, TrusError, exit_code_for
from .metrics import EvalReport, evaluate, plot_roc
from .trainer import train
from .videodata import DatasetManifest, split_manifest

ABLATION_JSON = "ablation.json"
ABLATION_MD = "ablation.md"
METRICS = ("auc", "f1", "accuracy")


@dataclass
class VariantRun:
    variant: str
    seed: int
    report: Optional[EvalReport] = None
    error: Optional[str] = None
    exit_code: int = 0

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class AblationResult:
    runs: List[VariantRun] = field(default_factory=list)
    splits: Dict[int, Dict[str, List[str]]] = field(default_factory=dict)

    @property
    def failures(self) -> List[VariantRun]:
        return [r for r in self.runs if not r.ok]

    def summary(self) -> Dict[str, Dict]:
        """Per variant: mean of each metric over successful seeds, plus the per-seed values."""
        rows: Dict[str, Dict] = {}
        for run in self.runs:
            row = rows.setdefault(run.variant, {"per_seed": {}, "failed_seeds": []})
            if run.ok:
                row["per_seed"][str(run.seed)] = {m: getattr(run.report, m) for m in METRICS}
            else:
                row["failed_seeds"].append(run.seed)
        for row in rows.values():
            values = list(row["per_seed"].values())
            for m in METRICS:
                row[m] = float(np.mean([v[m] for v in values])) if values else None
        return rows


def best_per_column(summary: Dict[str, Dict]) -> Dict[str, List[str]]:
    best = {}
    for m in METRICS:
        scored = {v: row[m] for v, row in summary.items() if row[m] is not None}
        if scored:
            top = max(scored.values())
            best[m] = [v for v, s in scored.items() if s == top]
        else:
            best[m] = []
    return best


def render_markdown(summary: Dict[str, Dict]) -> str:
    best = best_per_column(summary)
    lines = ["| Variant | AUC | F1 | Acc |", "|---|---|---|---|"]
    for variant, row in summary.items():
        cells = []
        for m in METRICS:
            if row[m] is None:
                cells.append("failed")
            elif variant in best[m]:
                cells.append(f"**{row[m]:.4f}**")
            else:
                cells.append(f"{row[m]:.4f}")
        lines.append(f"| {variant} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_tables(result: AblationResult, out_dir: Path):
    summary = result.summary()
    payload = {
        "variants": summary,
        "best": best_per_column(summary),
        "splits": {str(k): v for k, v in result.splits.items()},
        "failures": [{"variant": r.variant, "seed": r.seed, "error": r.error} for r in result.failures],
    }
    try:
        (out_dir / ABLATION_JSON).write_text(json.dumps(payload, indent=2, sort_keys=True))
        (out_dir / ABLATION_MD).write_text(render_markdown(summary))
    except OSError as e:
        raise DataError(f"Cannot write ablation tables in {out_dir}: {e}") from e


def run_ablation(document: RunConfigDocument, manifest: DatasetManifest, out_dir,
                 on_run: Optional[Callable[[VariantRun], None]] = None) -> AblationResult:
    """Every variant of a seed shares that seed's split and initialization/shuffle seeds."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Cannot create output directory {out_dir}: {e}") from e
    manifest.check_files()

    result = AblationResult()
    data = document.data
    for seed in document.ablation.seeds:
        train_set, test_set = split_manifest(manifest, data.test_fraction, data.split_seed + seed)
        result.splits[seed] = {"train": train_set.ids, "test": test_set.ids}
        curves = {}
        for variant in document.ablation.variants:
            run = VariantRun(variant=variant, seed=seed)
            run_dir = out_dir / f"seed_{seed}" / variant
            with logger.contextualize(run=variant, seed=seed):
                try:
                    network_config, train_config = variant_configs(document, variant)
                    train_config = override(
                        train_config,
                        init_seed=train_config.init_seed + seed,
                        shuffle_seed=train_config.shuffle_seed + seed,
                    )
                    resolved = override_variant(document, variant, network_config, train_config)
                    model, _ = train(network_config, train_config, train_set, run_dir,
                                     input_dims=data.input_dims, resolved_config=resolved,
                                     cache_size=data.cache_size)
                    run.report = evaluate(model, test_set, run_dir / "eval",
                                          threshold=document.evaluation.threshold,
                                          input_dims=data.input_dims, cache_size=data.cache_size)
                    curves[variant] = run.report.roc_points
                except TrusError as e:
                    run.error, run.exit_code = str(e), e.exit_code
                    logger.error(f"Variant {variant} (seed {seed}) failed: {e}")
                except Exception as e:
                    run.error, run.exit_code = f"{type(e).__name__}: {e}", exit_code_for(e)
                    logger.exception(f"Variant {variant} (seed {seed}) failed unexpectedly")
            result.runs.append(run)
            if on_run is not None:
                on_run(run)
        if curves and document.evaluation.roc_plot:
            try:
                plot_roc(curves, out_dir / f"seed_{seed}" / "roc.png", title=f"ROC (seed {seed})")
            except (TrusError, OSError, ValueError) as e:
                logger.error(f"ROC figure for seed {seed} failed: {e}")

    write_tables(result, out_dir)
    return result


def override_variant(document: RunConfigDocument, variant: str, network_config, train_config) -> Dict:
    resolved = document.resolved()
    resolved.update(
        variant=variant,
        network=network_config.model_dump(mode="json"),
        training=train_config.model_dump(mode="json"),
    )
    return resolved
