#!/usr/bin/env python3
"""
Classification metrics and evaluation reports.

ROC points are built by sweeping the unique scores in descending order, with
tied scores flipping together; the trapezoidal area under that curve equals the
Mann-Whitney statistic with ties counted as one half.
"""

import csv
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel

from .errors import ConfigError, DataError
from .network import ModelState, predict_proba
from .videodata import DEFAULT_CACHE_SIZE, DatasetManifest, SampleStore

REPORT_FILE = "report.json"
ROC_FILE = "roc.csv"
ROC_PLOT_FILE = "roc.png"


class RocPoint(BaseModel):
    fpr: float
    tpr: float
    threshold: Optional[float] = None  # None for the (0, 0) start point


class SampleScore(BaseModel):
    id: str
    score: float
    label: int
    predicted: int


class EvalReport(BaseModel):
    auc: float
    f1: float
    accuracy: float
    threshold: float = 0.5
    f1_zero_denominator: bool = False
    roc_points: List[RocPoint]
    per_sample: List[SampleScore]

    def write(self, path) -> Path:
        path = Path(path)
        try:
            path.write_text(self.model_dump_json(indent=2))
        except OSError as e:
            raise DataError(f"Cannot write report {path}: {e}") from e
        return path


def _check_inputs(scores: Sequence[float], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError(f"scores {scores.shape} and labels {labels.shape} must be matching 1-D sequences")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    return scores, labels


def _roc_counts(scores: Sequence[float], labels: Sequence[int]):
    """Cumulative (false positives, true positives, threshold) per unique score, descending."""
    scores, labels = _check_inputs(scores, labels)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        missing = "positive" if n_pos == 0 else "negative"
        raise DataError(f"ROC needs both classes; no {missing} samples given")
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    counts = [(0, 0, None)]
    fp = tp = 0
    for i, (score, label) in enumerate(zip(scores, labels)):
        tp += int(label == 1)
        fp += int(label == 0)
        if i + 1 == len(scores) or scores[i + 1] != score:
            counts.append((fp, tp, float(score)))
    return counts, n_pos, n_neg


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> List[RocPoint]:
    counts, n_pos, n_neg = _roc_counts(scores, labels)
    return [RocPoint(fpr=fp / n_neg, tpr=tp / n_pos, threshold=t) for fp, tp, t in counts]


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    counts, n_pos, n_neg = _roc_counts(scores, labels)
    # trapezoids on integer counts keep half-credit ties exact
    area = 0.0
    for (fp0, tp0, _), (fp1, tp1, _) in zip(counts, counts[1:]):
        area += (fp1 - fp0) * (tp0 + tp1) / 2.0
    return area / (n_pos * n_neg)


def confusion(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> Dict[str, int]:
    scores, labels = _check_inputs(scores, labels)
    predicted = scores >= threshold
    positive = labels == 1
    return {
        "tp": int(np.sum(predicted & positive)),
        "fp": int(np.sum(predicted & ~positive)),
        "fn": int(np.sum(~predicted & positive)),
        "tn": int(np.sum(~predicted & ~positive)),
    }


def f1_and_accuracy(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> Tuple[float, float]:
    """F1 (0 when TP + FP + FN = 0) and accuracy, predicting positive when score >= threshold."""
    if len(scores) == 0:
        raise DataError("Cannot compute F1/accuracy on empty input")
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {threshold}")
    c = confusion(scores, labels, threshold)
    denominator = 2 * c["tp"] + c["fp"] + c["fn"]
    f1 = 2 * c["tp"] / denominator if denominator else 0.0
    accuracy = (c["tp"] + c["tn"]) / len(scores)
    return f1, accuracy


def build_report(ids: Sequence[str], scores: Sequence[float], labels: Sequence[int],
                 threshold: float = 0.5) -> EvalReport:
    rows = sorted(zip(ids, scores, labels), key=lambda row: row[0])
    ids = [r[0] for r in rows]
    scores = [float(r[1]) for r in rows]
    labels = [int(r[2]) for r in rows]
    f1, accuracy = f1_and_accuracy(scores, labels, threshold)
    c = confusion(scores, labels, threshold)
    return EvalReport(
        auc=auc(scores, labels),
        f1=f1,
        accuracy=accuracy,
        threshold=threshold,
        f1_zero_denominator=(2 * c["tp"] + c["fp"] + c["fn"]) == 0,
        roc_points=roc_curve(scores, labels),
        per_sample=[
            SampleScore(id=i, score=s, label=y, predicted=int(s >= threshold))
            for i, s, y in zip(ids, scores, labels)
        ],
    )


def write_roc_csv(points: Sequence[RocPoint], path) -> Path:
    path = Path(path)
    try:
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["fpr", "tpr", "threshold"])
            for p in points:
                writer.writerow([repr(p.fpr), repr(p.tpr), "inf" if p.threshold is None else repr(p.threshold)])
    except OSError as e:
        raise DataError(f"Cannot write ROC file {path}: {e}") from e
    return path


def read_roc_csv(path) -> List[RocPoint]:
    path = Path(path)
    try:
        with path.open(newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise DataError(f"Cannot read ROC file {path}: {e}") from e
    return [
        RocPoint(
            fpr=float(r["fpr"]),
            tpr=float(r["tpr"]),
            threshold=None if math.isinf(float(r["threshold"])) else float(r["threshold"]),
        )
        for r in rows
    ]


def plot_roc(curves: Dict[str, Sequence[RocPoint]], path, title: str = "ROC") -> Path:
    """Draw one or more ROC curves into a PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 5))
    try:
        for name, points in curves.items():
            ax.plot([p.fpr for p in points], [p.tpr for p in points], label=name, linewidth=1.5)
        ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        ax.set_title(title)
        ax.legend(loc="lower right")
        fig.savefig(path, dpi=120, bbox_inches="tight")
    except OSError as e:
        raise DataError(f"Cannot write ROC figure {path}: {e}") from e
    finally:
        plt.close(fig)
    return path


def score_manifest(model: ModelState, manifest: DatasetManifest,
                   input_dims: Optional[Tuple[int, int, int]] = None,
                   cache_size: int = DEFAULT_CACHE_SIZE) -> Dict[str, float]:
    manifest.check_files()
    store = SampleStore(manifest, input_dims, cache_size)
    return {sample_id: predict_proba(model, store.get(sample_id)) for sample_id in sorted(manifest.ids)}


def evaluate(model: ModelState, manifest: DatasetManifest, out_dir=None, threshold: float = 0.5,
             input_dims: Optional[Tuple[int, int, int]] = None, roc_plot: bool = False,
             cache_size: int = DEFAULT_CACHE_SIZE) -> EvalReport:
    """Score every manifest sample in evaluation mode and assemble (and optionally write) the report."""
    scores = score_manifest(model, manifest, input_dims, cache_size)
    labels = {e.id: e.label for e in manifest.entries}
    ids = sorted(scores)
    report = build_report(ids, [scores[i] for i in ids], [labels[i] for i in ids], threshold)

    if out_dir is not None:
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DataError(f"Cannot create output directory {out_dir}: {e}") from e
        report.write(out_dir / REPORT_FILE)
        write_roc_csv(report.roc_points, out_dir / ROC_FILE)
        if roc_plot:
            plot_roc({"model": report.roc_points}, out_dir / ROC_PLOT_FILE)
        logger.info(f"Wrote evaluation report to {out_dir} (AUC {report.auc:.4f})")
    return report
