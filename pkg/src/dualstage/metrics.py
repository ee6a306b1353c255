"""Accuracy, confusion matrix, precision/recall, PR curve, and report files.

The headline accuracy is single-label: argmax of the logits against argmax
of the multi-hot target (ties to the lowest index). Multi-label quality is
reported alongside as per-label precision/recall at threshold 0.5 and a
micro-averaged PR curve over the pooled (sample, label) decisions.

Convention at degenerate counts: precision with no predicted positives is
1.0 (an empty prediction set contains no mistakes); recall with no actual
positives is undefined and raises (or is null in the report).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import data as data_mod
from . import svg
from .errors import MetricsError
from .fusion import DualStageModel, forward


def accuracy(predicted, actual) -> float:
    predicted = np.asarray(predicted)
    actual = np.asarray(actual)
    if predicted.shape != actual.shape:
        raise MetricsError(f"accuracy: length mismatch {predicted.shape} vs {actual.shape}")
    if predicted.size == 0:
        raise MetricsError("accuracy: empty input")
    return float((predicted == actual).sum() / predicted.size)


def confusion(predicted, actual, num_labels: int) -> np.ndarray:
    """[i, j] counts samples of true class i predicted as class j."""
    predicted = np.asarray(predicted, dtype=np.int64)
    actual = np.asarray(actual, dtype=np.int64)
    if predicted.shape != actual.shape:
        raise MetricsError("confusion: length mismatch")
    if predicted.size and not (
        (0 <= predicted).all() and (predicted < num_labels).all()
        and (0 <= actual).all() and (actual < num_labels).all()
    ):
        raise MetricsError(f"confusion: labels out of range [0, {num_labels})")
    matrix = np.zeros((num_labels, num_labels), dtype=np.int64)
    np.add.at(matrix, (actual, predicted), 1)
    return matrix


def confusion_csv(matrix: np.ndarray, vocabulary: list[str]) -> str:
    lines = ["true\\predicted," + ",".join(vocabulary)]
    for i, name in enumerate(vocabulary):
        lines.append(name + "," + ",".join(str(int(v)) for v in matrix[i]))
    return "\n".join(lines) + "\n"


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    if min(tp, fp, fn) < 0:
        raise MetricsError("precision_recall: counts must be non-negative")
    if tp + fn == 0:
        raise MetricsError("precision_recall: no actual positives, recall undefined")
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    return precision, tp / (tp + fn)


def pr_curve(scores: np.ndarray, targets: np.ndarray) -> list[tuple[float, float, float]]:
    """Micro-averaged (threshold, precision, recall) points.

    All N*K (score, target) pairs are pooled; thresholds are the distinct
    scores in descending order, prediction rule score >= threshold. The last
    point (threshold = min score) predicts every pair positive, so the curve
    always ends at recall 1 with precision equal to the positive base rate;
    a separate below-minimum endpoint would duplicate it.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets).reshape(-1)
    if scores.size == 0 or scores.shape != targets.shape:
        raise MetricsError("pr_curve: empty input or shape mismatch")
    positives = int(targets.sum())
    if positives == 0:
        raise MetricsError("pr_curve: no positive targets")
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    t_sorted = targets[order].astype(np.int64)
    tp_cum = np.cumsum(t_sorted)
    distinct = np.nonzero(np.diff(s_sorted, append=-np.inf))[0]  # last index of each value run
    points = []
    for idx in distinct:
        tp = int(tp_cum[idx])
        predicted = idx + 1
        points.append((float(s_sorted[idx]), tp / predicted, tp / positives))
    return points


def pr_curve_csv(points) -> str:
    lines = ["threshold,precision,recall"]
    for t, p, r in points:
        lines.append(f"{t!r},{p!r},{r!r}")
    return "\n".join(lines) + "\n"


@dataclass
class MetricsReport:
    vocabulary: list[str]
    accuracy: float
    confusion: np.ndarray
    pr_points: list[tuple[float, float, float]]
    per_label: dict[str, dict]
    num_samples: int
    multi_positive_samples: int
    no_positive_samples: int
    mean_threshold_accuracy: float
    config_sha256: str

    def to_json(self) -> str:
        payload = {
            "accuracy": self.accuracy,
            "num_samples": self.num_samples,
            "multi_positive_samples": self.multi_positive_samples,
            "no_positive_samples": self.no_positive_samples,
            "per_label": self.per_label,
            "mean_threshold_accuracy": self.mean_threshold_accuracy,
            "config_sha256": self.config_sha256,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
        with open(os.path.join(out_dir, "confusion_matrix.csv"), "w", encoding="utf-8") as fh:
            fh.write(confusion_csv(self.confusion, self.vocabulary))
        with open(os.path.join(out_dir, "pr_curve.csv"), "w", encoding="utf-8") as fh:
            fh.write(pr_curve_csv(self.pr_points))
        chart = svg.line_chart(
            [(r, p) for _, p, r in self.pr_points],
            x_label="recall",
            y_label="precision",
            title="Precision-recall (micro-averaged)",
        )
        with open(os.path.join(out_dir, "pr_curve.svg"), "w", encoding="utf-8") as fh:
            fh.write(chart)


def score_dataset(
    model: DualStageModel,
    samples: list[data_mod.Sample],
    preprocess: data_mod.PreprocessConfig,
    *,
    image_root: str = "",
    batch_size: int = 32,
) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid probabilities [N, K] and multi-hot targets [N, K], manifest order."""
    probs, targets = [], []
    for images, batch_targets in data_mod.batches(
        samples, batch_size, 0, training=False, config=preprocess,
        image_root=image_root, dtype=model.dtype,
    ):
        logits = forward(images, model)
        probs.append(expit(logits.data.astype(np.float64)))
        targets.append(batch_targets.data.astype(np.int64))
    if not probs:
        raise MetricsError("score_dataset: no samples survived decoding")
    return np.concatenate(probs), np.concatenate(targets)


def evaluate(
    model: DualStageModel,
    samples: list[data_mod.Sample],
    preprocess: data_mod.PreprocessConfig,
    *,
    image_root: str = "",
    batch_size: int = 32,
) -> MetricsReport:
    from .checkpoint import config_sha256

    if not samples:
        raise MetricsError("evaluate: empty dataset")
    probs, targets = score_dataset(
        model, samples, preprocess, image_root=image_root, batch_size=batch_size
    )
    k = len(model.vocabulary)
    predicted = np.argmax(probs, axis=1)
    actual = np.argmax(targets, axis=1)  # ties and all-zero rows resolve to the lowest index
    matrix = confusion(predicted, actual, k)
    acc = float(np.trace(matrix) / matrix.sum())
    per_label = {}
    threshold_accs = []
    hard = probs >= 0.5
    for j, name in enumerate(model.vocabulary):
        tp = int((hard[:, j] & (targets[:, j] == 1)).sum())
        fp = int((hard[:, j] & (targets[:, j] == 0)).sum())
        fn = int((~hard[:, j] & (targets[:, j] == 1)).sum())
        precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
        recall = None if tp + fn == 0 else tp / (tp + fn)
        t_acc = float((hard[:, j] == (targets[:, j] == 1)).mean())
        threshold_accs.append(t_acc)
        per_label[name] = {"precision": precision, "recall": recall, "threshold_accuracy": t_acc}
    return MetricsReport(
        vocabulary=list(model.vocabulary),
        accuracy=acc,
        confusion=matrix,
        pr_points=pr_curve(probs, targets),
        per_label=per_label,
        num_samples=int(targets.shape[0]),  # counts scored samples (skip policy may drop)
        multi_positive_samples=int((targets.sum(axis=1) > 1).sum()),
        no_positive_samples=int((targets.sum(axis=1) == 0).sum()),
        mean_threshold_accuracy=float(np.mean(threshold_accs)),
        config_sha256=config_sha256(model),
    )
