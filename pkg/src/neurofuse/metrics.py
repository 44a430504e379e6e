"""Classification metrics: confusion matrix, precision/recall/F1, MCC, ROC/AUC.

Everything in here is pure array math over integer count matrices or score
matrices; the only stateful corner is ``emit_plots``, which writes PNG figures
and plain-text tables to disk.  Averaging conventions are fixed once:

* headline precision/recall/F1 are macro (unweighted class means), with the
  micro-pooled variants reported alongside,
* every 0/0 ratio (empty class precision, MCC with a degenerate marginal)
  resolves to 0,
* AUC for a class with no positives or no negatives is ``None`` rather than
  a number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .validation import check_labels

__all__ = [
    "MetricReport",
    "RocCurve",
    "RocReport",
    "compute_metrics",
    "confusion_matrix",
    "emit_plots",
    "evaluate",
    "format_report",
    "roc_auc",
]


@dataclass(frozen=True)
class RocCurve:
    """One ROC polyline.  ``auc`` is None when the class has only one label."""

    fpr: np.ndarray
    tpr: np.ndarray
    auc: float | None


@dataclass(frozen=True)
class RocReport:
    per_class: tuple[RocCurve, ...]
    micro: RocCurve


@dataclass(frozen=True)
class MetricReport:
    confusion: np.ndarray  # (K, K) int64, rows = true class, cols = predicted
    accuracy: float
    precision: np.ndarray  # per-class, one-vs-rest
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    micro_precision: float
    micro_recall: float
    micro_f1: float
    mcc: float
    roc: RocReport | None = None

    @property
    def n_classes(self) -> int:
        return self.confusion.shape[0]

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


def confusion_matrix(y_true, y_pred, n_classes: int | None = None) -> np.ndarray:
    """Count matrix with true classes on rows and predicted classes on columns."""
    y_true = np.asarray(y_true)
    if y_true.ndim != 1:
        raise ValueError(f"y_true must be 1-D, got shape {y_true.shape}")
    y_true = check_labels(y_true, y_true.shape[0], "y_true")
    y_pred = check_labels(y_pred, y_true.shape[0], "y_pred")
    if n_classes is None:
        n_classes = int(max(y_true.max(), y_pred.max())) + 1
    elif y_true.max() >= n_classes or y_pred.max() >= n_classes:
        raise ValueError("class id exceeds n_classes")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _check_confusion(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if not np.issubdtype(cm.dtype, np.integer):
        cast = cm.astype(np.int64)
        if not np.array_equal(cast, cm):
            raise ValueError("confusion matrix must hold integer counts")
        cm = cast
    if cm.min() < 0:
        raise ValueError("confusion matrix contains negative counts")
    if cm.sum() == 0:
        raise ValueError("confusion matrix is empty")
    return cm.astype(np.int64)


def compute_metrics(cm) -> MetricReport:
    """Derive every count-based metric from a confusion matrix.

    Per-class F1 is computed as 2*tp / (row + col), which equals the harmonic
    mean of precision and recall whenever tp > 0 and matches the 0/0 -> 0
    convention when tp == 0, while staying a single exact integer ratio.
    """
    cm = _check_confusion(cm)
    k = cm.shape[0]
    diag = np.diagonal(cm).astype(np.float64)
    rows = cm.sum(axis=1).astype(np.float64)  # true-class counts
    cols = cm.sum(axis=0).astype(np.float64)  # predicted-class counts
    total = float(cm.sum())

    precision = np.divide(diag, cols, out=np.zeros(k), where=cols > 0)
    recall = np.divide(diag, rows, out=np.zeros(k), where=rows > 0)
    f1 = np.divide(2.0 * diag, rows + cols, out=np.zeros(k), where=diag > 0)

    tp = float(diag.sum())
    fp = float((cols - diag).sum())
    fn = float((rows - diag).sum())
    micro_p = tp / (tp + fp) if tp + fp > 0 else 0.0
    micro_r = tp / (tp + fn) if tp + fn > 0 else 0.0
    micro_f1 = 2.0 * micro_p * micro_r / (micro_p + micro_r) if micro_p + micro_r > 0 else 0.0

    # Gorodkin's multiclass MCC from the marginals; int64 keeps the sums exact.
    s = int(cm.sum())
    c = int(np.trace(cm))
    t = cm.sum(axis=1)
    p = cm.sum(axis=0)
    cov_xy = c * s - int(np.dot(p, t))
    cov_xx = s * s - int(np.dot(p, p))
    cov_yy = s * s - int(np.dot(t, t))
    if cov_xx == 0 or cov_yy == 0:
        mcc = 0.0
    else:
        mcc = cov_xy / math.sqrt(float(cov_xx) * float(cov_yy))

    return MetricReport(
        confusion=cm,
        accuracy=float(diag.sum()) / total,
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        micro_precision=micro_p,
        micro_recall=micro_r,
        micro_f1=micro_f1,
        mcc=mcc,
    )


def _roc_curve(scores: np.ndarray, positives: np.ndarray) -> RocCurve:
    pos_total = int(positives.sum())
    neg_total = positives.size - pos_total
    if pos_total == 0 or neg_total == 0:
        return RocCurve(fpr=np.empty(0), tpr=np.empty(0), auc=None)
    order = np.argsort(-scores, kind="stable")
    hit = positives[order].astype(np.float64)
    ranked = scores[order]
    tps = np.cumsum(hit)
    fps = np.cumsum(1.0 - hit)
    # one curve point per distinct score value: keep the last index of each
    # tie group so equal scores move the operating point together
    keep = np.flatnonzero(np.diff(ranked))
    keep = np.concatenate([keep, [ranked.size - 1]])
    tpr = np.concatenate([[0.0], tps[keep] / pos_total])
    fpr = np.concatenate([[0.0], fps[keep] / neg_total])
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1])) / 2.0)
    return RocCurve(fpr=fpr, tpr=tpr, auc=auc)


def roc_auc(scores, labels) -> RocReport:
    """One-vs-rest ROC curves with trapezoid AUC, plus the micro-pooled curve.

    ``scores`` is an (n, k) array of per-class scores (probabilities or
    logits; only their ordering matters).  The micro curve pools all n*k
    (score, is-this-the-true-class) pairs into one binary problem.
    """
    scores = np.asarray(getattr(scores, "data", scores), dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"scores must be 2-D (n_samples, n_classes), got shape {scores.shape}")
    n, k = scores.shape
    if n < 2:
        raise ValueError("ROC needs at least two samples")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite values")
    labels = check_labels(labels, n, "labels")
    if labels.max() >= k:
        raise ValueError(f"label {labels.max()} exceeds the score width {k}")

    per_class = tuple(_roc_curve(scores[:, c], labels == c) for c in range(k))
    onehot = np.zeros((n, k), dtype=bool)
    onehot[np.arange(n), labels] = True
    micro = _roc_curve(scores.ravel(), onehot.ravel())
    return RocReport(per_class=per_class, micro=micro)


def evaluate(scores, labels, n_classes: int | None = None) -> MetricReport:
    """Full report from raw scores: argmax predictions + count metrics + ROC."""
    scores = np.asarray(getattr(scores, "data", scores), dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"scores must be 2-D, got shape {scores.shape}")
    if n_classes is None:
        n_classes = scores.shape[1]
    preds = np.argmax(scores, axis=1)
    cm = confusion_matrix(labels, preds, n_classes=n_classes)
    report = compute_metrics(cm)
    return replace(report, roc=roc_auc(scores, labels))


def _fmt(value: float | None) -> str:
    return "undefined" if value is None else format(value, ".12f")


def format_report(report: MetricReport) -> str:
    lines = [
        f"samples: {report.total}",
        f"accuracy: {_fmt(report.accuracy)}",
        f"macro precision: {_fmt(report.macro_precision)}",
        f"macro recall: {_fmt(report.macro_recall)}",
        f"macro f1: {_fmt(report.macro_f1)}",
        f"micro precision: {_fmt(report.micro_precision)}",
        f"micro recall: {_fmt(report.micro_recall)}",
        f"micro f1: {_fmt(report.micro_f1)}",
        f"mcc: {_fmt(report.mcc)}",
    ]
    if report.roc is not None:
        lines.append(f"micro auc: {_fmt(report.roc.micro.auc)}")
    lines.append("")
    for i in range(report.n_classes):
        parts = [
            f"class {i}:",
            f"precision {_fmt(float(report.precision[i]))}",
            f"recall {_fmt(float(report.recall[i]))}",
            f"f1 {_fmt(float(report.f1[i]))}",
        ]
        if report.roc is not None:
            parts.append(f"auc {_fmt(report.roc.per_class[i].auc)}")
        lines.append(" ".join(parts))
    lines.append("")
    lines.append("confusion matrix (rows true, cols predicted):")
    width = max(len(str(int(v))) for v in report.confusion.ravel())
    for row in report.confusion:
        lines.append(" ".join(str(int(v)).rjust(width) for v in row))
    lines.append("")
    return "\n".join(lines)


def _roc_table(roc: RocReport) -> str:
    lines = []
    names = [f"class {i}" for i in range(len(roc.per_class))] + ["micro"]
    for name, curve in zip(names, list(roc.per_class) + [roc.micro]):
        lines.append(f"curve {name} (auc {_fmt(curve.auc)})")
        lines.append("fpr tpr")
        for x, y in zip(curve.fpr, curve.tpr):
            lines.append(f"{x:.12f} {y:.12f}")
        lines.append("")
    return "\n".join(lines)


# savefig settings shared by both figures; fixed dpi plus stripped metadata
# keep re-emission byte-identical for identical reports
_SAVEFIG = {"dpi": 120, "metadata": {"Software": None}}


def _plot_roc(report: MetricReport, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    for i, curve in enumerate(report.roc.per_class):
        if curve.auc is None:
            continue
        ax.plot(curve.fpr, curve.tpr, linewidth=1.2, label=f"class {i} (AUC {curve.auc:.4f})")
    micro = report.roc.micro
    if micro.auc is not None:
        ax.plot(micro.fpr, micro.tpr, "--", color="black", linewidth=1.4,
                label=f"micro (AUC {micro.auc:.4f})")
    ax.plot([0.0, 1.0], [0.0, 1.0], ":", color="grey", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def _plot_confusion(report: MetricReport, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    cm = report.confusion
    k = cm.shape[0]
    fig, ax = plt.subplots(figsize=(5.0, 4.5))
    image = ax.imshow(cm, cmap="Blues")
    cutoff = cm.max() / 2.0
    for i in range(k):
        for j in range(k):
            color = "white" if cm[i, j] > cutoff else "black"
            ax.text(j, i, str(int(cm[i, j])), ha="center", va="center",
                    fontsize=8, color=color)
    fig.colorbar(image, ax=ax)
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    ax.set_xticks(range(k))
    ax.set_yticks(range(k))
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def emit_plots(report: MetricReport, out_dir) -> list[Path]:
    """Write the report as PNG figures plus plain-text tables under out_dir.

    The directory is created on demand.  Returns the paths written, sorted.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "metrics.txt"]
    (out / "metrics.txt").write_text(format_report(report), encoding="utf-8")
    if report.roc is not None:
        (out / "roc_points.txt").write_text(_roc_table(report.roc), encoding="utf-8")
        _plot_roc(report, out / "roc.png")
        paths += [out / "roc_points.txt", out / "roc.png"]
    _plot_confusion(report, out / "confusion.png")
    paths.append(out / "confusion.png")
    return sorted(paths)
