"""Binary classification metrics with malignant (label 1) as the positive class."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def _binary(a, name: str) -> np.ndarray:
    arr = np.asarray(a).reshape(-1)
    if not np.all((arr == 0) | (arr == 1)):
        raise DataError(f"{name} must be binary (0/1)")
    return arr.astype(np.int64)


def confusion(labels, predictions) -> ConfusionMatrix:
    y, p = _binary(labels, "labels"), _binary(predictions, "predictions")
    if y.size != p.size:
        raise DataError(f"{y.size} labels but {p.size} predictions")
    return ConfusionMatrix(tp=int(np.sum((y == 1) & (p == 1))), fp=int(np.sum((y == 0) & (p == 1))),
                           tn=int(np.sum((y == 0) & (p == 0))), fn=int(np.sum((y == 1) & (p == 0))))


@dataclass
class Scores:
    accuracy: float
    precision: float
    recall: float
    f1: float
    precision_undefined: bool = False
    recall_undefined: bool = False


def scores(cm: ConfusionMatrix) -> Scores:
    """Accuracy/precision/recall/F1; a 0/0 rate is reported as 0 and flagged."""
    if cm.total == 0:
        raise DataError("confusion matrix is empty")
    acc = (cm.tp + cm.tn) / cm.total
    p_den, r_den = cm.tp + cm.fp, cm.tp + cm.fn
    precision = cm.tp / p_den if p_den else 0.0
    recall = cm.tp / r_den if r_den else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return Scores(acc, precision, recall, f1, p_den == 0, r_den == 0)


@dataclass
class RocCurve:
    thresholds: list[float]
    fpr: list[float]
    tpr: list[float]
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr, self.tpr))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, x, y in zip(self.thresholds, self.fpr, self.tpr):
            w.writerow([repr(float(t)), repr(float(x)), repr(float(y))])
        return buf.getvalue()


def roc_curve(labels, positive_scores) -> RocCurve:
    """Sweep thresholds over the distinct scores in descending order; equal
    scores move together as one step. Starts at (0, 0) with threshold +inf."""
    y = _binary(labels, "labels")
    s = np.asarray(positive_scores, dtype=np.float64).reshape(-1)
    if s.size != y.size:
        raise DataError("labels and scores differ in length")
    n_pos, n_neg = int(y.sum()), int(y.size - y.sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs at least one positive and one negative label")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve([float("inf")] + s[last].tolist(), fpr.tolist(), tpr.tolist(), auc)


def roc_auc(labels, positive_scores) -> tuple[list[tuple[float, float]], float]:
    curve = roc_curve(labels, positive_scores)
    return curve.points, curve.auc


@dataclass
class MagnificationReport:
    n: int
    confusion: dict
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: Optional[float]
    precision_undefined: bool = False
    recall_undefined: bool = False
    roc: Optional[dict] = None


def summarize(labels, positive_scores, predictions=None) -> MagnificationReport:
    y = _binary(labels, "labels")
    s = np.asarray(positive_scores, dtype=np.float64)
    pred = (s > 0.5).astype(int) if predictions is None else _binary(predictions, "predictions")
    cm = confusion(y, pred)
    sc = scores(cm)
    auc, roc = None, None
    if 0 < y.sum() < y.size:
        curve = roc_curve(y, s)
        auc = curve.auc
        roc = {"threshold": curve.thresholds, "fpr": curve.fpr, "tpr": curve.tpr}
    return MagnificationReport(int(y.size), asdict(cm), sc.accuracy, sc.precision, sc.recall, sc.f1,
                               auc, sc.precision_undefined, sc.recall_undefined, roc)


@dataclass
class EvalReport:
    per_magnification: dict[str, MagnificationReport] = field(default_factory=dict)
    overall: Optional[MagnificationReport] = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_magnification": {k: asdict(v) for k, v in self.per_magnification.items()},
                "overall": asdict(self.overall) if self.overall else None, "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(model, records, cfg, batch_size: int = 32) -> EvalReport:
    """Eval-mode predictions over ``records`` (SampleRecords), grouped by magnification.

    The ROC score is the softmax probability of class 1; the prediction is the
    argmax over the two logits.
    """
    from . import ops
    from .backbone import forward
    from .data import ImageSet
    from .tensor import no_grad

    ds = ImageSet(records, cfg, augment_train=False)
    probs, preds = [], []
    with no_grad():
        for x, _ in ds.batches(batch_size):
            logits = forward(model, x, training=False)
            probs.append(ops.softmax(logits, axis=1).data[:, 1])
            preds.append(np.argmax(logits.data, axis=1))
    prob, pred = np.concatenate(probs), np.concatenate(preds)
    mags = np.array([r.magnification for r in ds.records])
    report = EvalReport()
    for mag in sorted(set(mags), key=lambda m: int(m.rstrip("X"))):
        sel = mags == mag
        report.per_magnification[mag] = summarize(ds.labels[sel], prob[sel], pred[sel])
    report.overall = summarize(ds.labels, prob, pred)
    return report
