"""Confusion-matrix segmentation metrics and precision/recall/F1 matrices."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LabelError, ShapeError

CLASS_NAMES = ("Background", "Blossom end", "Stem end", "Flaw", "Ulcer")


@dataclass
class ConfusionMatrix:
    """``counts[i, j]``: pixels of ground-truth class i predicted as class j."""

    num_classes: int
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        accumulate(self, pred, gt)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred_mask, gt_mask) -> ConfusionMatrix:
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ShapeError(f"accumulate: prediction {pred.shape} vs ground truth {gt.shape}")
    k = cm.num_classes
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise LabelError(f"accumulate: {name} contains class id outside [0, {k})")
    flat = gt.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
    cm.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
    return cm


def compute_metrics(cm: ConfusionMatrix) -> dict:
    """pixel acc., mean acc., mean IU, f.w. IU and per-class IU (fractions in [0, 1]).

    Means run over "valid" classes, those present in either the ground truth
    or the prediction; per-class IU is NaN for the others.
    """
    n = cm.counts.astype(np.float64)
    total = n.sum()
    if total <= 0:
        raise ValueError("compute_metrics: empty confusion matrix")
    diag = np.diag(n)
    t = n.sum(axis=1)
    predicted = n.sum(axis=0)
    union = t + predicted - diag
    valid = (t + predicted) > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        iu = np.where(valid, diag / np.where(union > 0, union, 1), np.nan)
        acc = np.where(t > 0, diag / np.where(t > 0, t, 1), 0.0)
    return {
        "pixel_acc": float(diag.sum() / total),
        "mean_acc": float(acc[valid].mean()),
        "mean_iu": float(iu[valid].mean()),
        "fw_iu": float((t[valid] * iu[valid]).sum() / t.sum()),
        "per_class_iu": [float(v) for v in iu],
    }


def prf_matrices(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    """Column-normalised precision, row-normalised recall and their elementwise F1, in percent.

    Entries whose normaliser is zero are 0; the returned dict lists the empty
    rows and columns.
    """
    n = cm.counts.astype(np.float64)
    col = n.sum(axis=0, keepdims=True)
    row = n.sum(axis=1, keepdims=True)
    p = np.divide(100.0 * n, col, out=np.zeros_like(n), where=col > 0)
    r = np.divide(100.0 * n, row, out=np.zeros_like(n), where=row > 0)
    f1 = f1_from_pr(p, r)
    flags = {"empty_columns": np.flatnonzero(col[0] == 0).tolist(),
             "empty_rows": np.flatnonzero(row[:, 0] == 0).tolist()}
    return p, r, f1, flags


def f1_from_pr(p, r):
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    s = p + r
    return np.divide(2.0 * p * r, s, out=np.zeros(np.broadcast(p, r).shape), where=s > 0)


def format_table(rows: list[tuple[str, dict]], class_names=CLASS_NAMES) -> str:
    """Plain-text table with pixel acc., mean acc., mean IU, f.w. IU and per-class IU in percent."""
    k = len(rows[0][1]["per_class_iu"]) if rows else len(class_names)
    names = list(class_names[:k]) + [f"class{i}" for i in range(len(class_names), k)]
    head = ["Method", "pixel acc.", "mean acc.", "mean IU", "f.w. IU"] + names
    lines = ["\t".join(head)]
    for label, m in rows:
        vals = [m["pixel_acc"], m["mean_acc"], m["mean_iu"], m["fw_iu"]] + list(m["per_class_iu"])
        lines.append("\t".join([label] + ["nan" if np.isnan(v) else f"{100 * v:.3f}" for v in vals]))
    return "\n".join(lines)


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    k = matrix.shape[0]
    with open(path, "w") as fh:
        fh.write(",".join([""] + [f"{j}_p" for j in range(k)]) + "\n")
        for i in range(k):
            fh.write(",".join([f"{i}_t"] + [f"{v:.3f}" for v in matrix[i]]) + "\n")
