"""Interval-IoU metric, full-model evaluation over a manifest, mean-predictor
baseline, and report emission (JSON, CSV, SVG bar charts).

Each predicted and true value anchors a unit interval ([x, x+1] mm); the
score is the overlap of the two intervals over their union: (1 - d)/(1 + d)
for gap d < 1 mm, else 0.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .tgl import AbutmentRegressor, predict

IOU_UNIT_MM = 1.0  # interval length; "1 unit" = 1 mm
PARAM_NAMES = ("transgingival", "diameter", "height")


def interval_iou(pv: float, gt: float, unit: float = IOU_UNIT_MM) -> float:
    """IoU of [pv, pv+unit] and [gt, gt+unit]."""
    if not (np.isfinite(pv) and np.isfinite(gt)):
        raise ValueError(f"interval_iou needs finite inputs, got {pv}, {gt}")
    d = abs(pv - gt)
    if d >= unit:
        return 0.0
    return (unit - d) / (unit + d)


@dataclass
class IouResult:
    parameter: str
    prediction: float  # mm, clamped to >= 0
    ground_truth: float  # mm
    iou: float
    abs_error: float  # mm


@dataclass
class EvalReport:
    mean_iou_percent: dict  # parameter -> mean IoU * 100
    records: list  # per-sample lists of IouResult
    n_samples: int
    n_failures: int
    baseline_mean_iou_percent: dict | None = None
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "mean_iou_percent": self.mean_iou_percent,
            "baseline_mean_iou_percent": self.baseline_mean_iou_percent,
            "n_samples": self.n_samples,
            "n_failures": self.n_failures,
            "metadata": self.metadata,
            "records": [[asdict(r) for r in sample] for sample in self.records],
        }


def score_predictions(preds: list, labels: list) -> EvalReport:
    """Score parallel lists of 3-vectors (predictions, mm) against labels
    ({parameter: mm} dicts). Negative predictions are clamped to 0."""
    records = []
    for pred, label in zip(preds, labels):
        pred = np.maximum(np.asarray(pred, dtype=float), 0.0)
        row = []
        for k, name in enumerate(PARAM_NAMES):
            gt = float(label[name])
            row.append(IouResult(parameter=name, prediction=float(pred[k]),
                                 ground_truth=gt,
                                 iou=interval_iou(float(pred[k]), gt),
                                 abs_error=abs(float(pred[k]) - gt)))
        records.append(row)
    means = {
        name: 100.0 * float(np.mean([row[k].iou for row in records]))
        for k, name in enumerate(PARAM_NAMES)
    }
    return EvalReport(mean_iou_percent=means, records=records,
                      n_samples=len(records), n_failures=0)


def baseline_mean_predictor(train_manifest) -> np.ndarray:
    """Constant predictor: the mean of each parameter over the training set."""
    labeled = [s.labels for s in train_manifest.samples if s.labels is not None]
    if not labeled:
        raise ValueError("baseline needs a non-empty labeled manifest")
    return np.array([
        float(np.mean([lab[name] for lab in labeled])) for name in PARAM_NAMES
    ])


def evaluate(model: AbutmentRegressor, mesh_samples: list, text_encoder,
             baseline: np.ndarray | None = None, failures: int = 0,
             metadata: dict | None = None) -> EvalReport:
    """Evaluate a trained model over preprocessed, labeled MeshSamples."""
    preds, labels = [], []
    for sample in mesh_samples:
        pred = predict(model, sample, text_encoder).clamped()
        preds.append(pred.as_array())
        labels.append(sample.labels)
    report = score_predictions(preds, labels)
    report.n_failures = failures
    report.metadata = metadata or {}
    if baseline is not None:
        base = score_predictions([baseline] * len(labels), labels)
        report.baseline_mean_iou_percent = base.mean_iou_percent
    return report


def emit_report(report: EvalReport, out_dir) -> dict:
    """Write results.json, results.csv and per-parameter SVG bar charts.

    Returns the paths written.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "json": os.path.join(out_dir, "results.json"),
        "csv": os.path.join(out_dir, "results.csv"),
    }
    with open(paths["json"], "w") as fh:
        json.dump(report.to_json(), fh, indent=2)
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "mean_iou", "n"])
        for name in PARAM_NAMES:
            writer.writerow([name, f"{report.mean_iou_percent[name]:.2f}",
                             report.n_samples])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for name in PARAM_NAMES:
        fig, ax = plt.subplots(figsize=(4, 3))
        bars = {"model": report.mean_iou_percent[name]}
        if report.baseline_mean_iou_percent:
            bars["baseline"] = report.baseline_mean_iou_percent[name]
        for key, value in (report.metadata.get("ablations") or {}).items():
            if name in value:
                bars[key] = value[name]
        ax.bar(list(bars), list(bars.values()), color="#4878cf")
        ax.set_ylabel("mean IoU (%)")
        ax.set_title(name)
        ax.set_ylim(0, 100)
        fig.tight_layout()
        svg = os.path.join(out_dir, f"iou_{name}.svg")
        fig.savefig(svg)
        plt.close(fig)
        paths[f"svg_{name}"] = svg
    return paths
