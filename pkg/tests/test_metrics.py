"""Metrics against independent definitional recomputations."""

import math
from fractions import Fraction

import numpy as np
import pytest

from neurofuse import metrics as M


# ---------------------------------------------------------------------------
# oracles: recompute everything from first principles, no shared code paths
# ---------------------------------------------------------------------------

def oracle_count_metrics(cm):
    """Exact-rational accuracy / per-class P, R, F1 / macro and micro means."""
    cm = np.asarray(cm, dtype=np.int64)
    k = cm.shape[0]
    total = int(cm.sum())
    acc = Fraction(int(np.trace(cm)), total)
    precs, recs, f1s = [], [], []
    for i in range(k):
        tp = int(cm[i, i])
        col = int(cm[:, i].sum())
        row = int(cm[i, :].sum())
        p = Fraction(tp, col) if col else Fraction(0)
        r = Fraction(tp, row) if row else Fraction(0)
        f = 2 * p * r / (p + r) if p + r else Fraction(0)
        precs.append(p)
        recs.append(r)
        f1s.append(f)
    tp_sum = int(np.trace(cm))
    fp_sum = total - tp_sum
    fn_sum = total - tp_sum
    mp = Fraction(tp_sum, tp_sum + fp_sum) if tp_sum + fp_sum else Fraction(0)
    mr = Fraction(tp_sum, tp_sum + fn_sum) if tp_sum + fn_sum else Fraction(0)
    mf = 2 * mp * mr / (mp + mr) if mp + mr else Fraction(0)
    return {
        "accuracy": acc,
        "precision": precs,
        "recall": recs,
        "f1": f1s,
        "macro_precision": sum(precs) / k,
        "macro_recall": sum(recs) / k,
        "macro_f1": sum(f1s) / k,
        "micro_precision": mp,
        "micro_recall": mr,
        "micro_f1": mf,
    }


def oracle_mcc(cm):
    """Gorodkin MCC straight from its covariance definition.

    Expand the confusion matrix back into per-sample one-hot label matrices
    and take cov(X, Y) / sqrt(cov(X, X) cov(Y, Y)) over mean-centred columns.
    """
    cm = np.asarray(cm, dtype=np.int64)
    k = cm.shape[0]
    true_ids, pred_ids = [], []
    for i in range(k):
        for j in range(k):
            true_ids += [i] * int(cm[i, j])
            pred_ids += [j] * int(cm[i, j])
    X = np.eye(k)[true_ids]
    Y = np.eye(k)[pred_ids]
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    cov_xy = float((Xc * Yc).sum())
    cov_xx = float((Xc * Xc).sum())
    cov_yy = float((Yc * Yc).sum())
    if cov_xx == 0.0 or cov_yy == 0.0:
        return 0.0
    return cov_xy / math.sqrt(cov_xx * cov_yy)


def pairwise_auc(scores, positives):
    """Mann-Whitney form: P(random positive outranks random negative),
    ties counted half."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    pos = scores[positives]
    neg = scores[~positives]
    if pos.size == 0 or neg.size == 0:
        return None
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def random_cm(rng):
    k = int(rng.integers(2, 9))
    cm = rng.integers(0, 30, size=(k, k))
    if rng.random() < 0.3:
        cm[:, int(rng.integers(k))] = 0  # a class nobody predicts
    if rng.random() < 0.3:
        cm[int(rng.integers(k)), :] = 0  # a class with no true samples
    if cm.sum() == 0:
        cm[0, 0] = 1
    return cm


# ---------------------------------------------------------------------------
# count-based metrics
# ---------------------------------------------------------------------------

class TestComputeMetrics:
    def test_perfect_diagonal(self):
        rep = M.compute_metrics(np.diag([7, 3, 11]))
        assert rep.accuracy == 1.0
        assert rep.macro_f1 == 1.0
        assert rep.mcc == 1.0
        assert np.all(rep.precision == 1.0)
        assert np.all(rep.recall == 1.0)

    def test_all_one_prediction_balanced_binary_mcc_zero(self):
        # every sample predicted class 0 on a 50/50 set: the predicted
        # marginal is degenerate, so the denominator guard fires
        rep = M.compute_metrics(np.array([[25, 0], [25, 0]]))
        assert rep.mcc == 0.0
        assert rep.accuracy == 0.5

    def test_thousand_random_matrices_match_definitional_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            cm = random_cm(rng)
            rep = M.compute_metrics(cm)
            ora = oracle_count_metrics(cm)
            assert abs(rep.accuracy - float(ora["accuracy"])) <= 1e-12
            for i in range(cm.shape[0]):
                assert abs(rep.precision[i] - float(ora["precision"][i])) <= 1e-12
                assert abs(rep.recall[i] - float(ora["recall"][i])) <= 1e-12
                assert abs(rep.f1[i] - float(ora["f1"][i])) <= 1e-12
            assert abs(rep.macro_precision - float(ora["macro_precision"])) <= 1e-12
            assert abs(rep.macro_recall - float(ora["macro_recall"])) <= 1e-12
            assert abs(rep.macro_f1 - float(ora["macro_f1"])) <= 1e-12
            assert abs(rep.micro_precision - float(ora["micro_precision"])) <= 1e-12
            assert abs(rep.micro_recall - float(ora["micro_recall"])) <= 1e-12
            assert abs(rep.micro_f1 - float(ora["micro_f1"])) <= 1e-12
            assert abs(rep.mcc - oracle_mcc(cm)) <= 1e-12

    def test_micro_equals_accuracy_identity(self):
        # for single-label multiclass, pooled FP == pooled FN, so micro
        # precision, micro recall, and accuracy coincide
        rng = np.random.default_rng(7)
        for _ in range(200):
            rep = M.compute_metrics(random_cm(rng))
            assert abs(rep.micro_precision - rep.micro_recall) <= 1e-12
            assert abs(rep.micro_precision - rep.accuracy) <= 1e-12

    def test_value_ranges(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            rep = M.compute_metrics(random_cm(rng))
            for v in (rep.accuracy, rep.macro_precision, rep.macro_recall,
                      rep.macro_f1, rep.micro_f1):
                assert 0.0 <= v <= 1.0
            assert -1.0 <= rep.mcc <= 1.0

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            M.compute_metrics(np.zeros((2, 3), dtype=np.int64))
        with pytest.raises(ValueError):
            M.compute_metrics(np.zeros((3, 3), dtype=np.int64))
        with pytest.raises(ValueError):
            M.compute_metrics(np.array([[1, -1], [0, 2]]))
        with pytest.raises(ValueError):
            M.compute_metrics(np.array([[0.5, 0.5], [0.0, 1.0]]))

    def test_confusion_matrix_builder(self):
        cm = M.confusion_matrix([0, 1, 2, 1], [0, 2, 2, 1], n_classes=3)
        expected = np.array([[1, 0, 0], [0, 1, 1], [0, 0, 1]])
        assert np.array_equal(cm, expected)
        assert cm.sum() == 4
        with pytest.raises(ValueError):
            M.confusion_matrix([0, 3], [0, 1], n_classes=3)


# ---------------------------------------------------------------------------
# ROC / AUC
# ---------------------------------------------------------------------------

class TestRocAuc:
    def test_perfect_separation(self):
        scores = np.array([[0.9, 0.1], [0.8, 0.2], [0.2, 0.8], [0.1, 0.9]])
        rep = M.roc_auc(scores, np.array([0, 0, 1, 1]))
        assert rep.per_class[0].auc == pytest.approx(1.0, abs=1e-12)
        assert rep.per_class[1].auc == pytest.approx(1.0, abs=1e-12)
        assert rep.micro.auc == pytest.approx(1.0, abs=1e-12)

    def test_inverted_scores(self):
        scores = np.array([[0.1, 0.9], [0.2, 0.8], [0.8, 0.2], [0.9, 0.1]])
        rep = M.roc_auc(scores, np.array([0, 0, 1, 1]))
        assert rep.per_class[0].auc == pytest.approx(0.0, abs=1e-12)
        assert rep.per_class[1].auc == pytest.approx(0.0, abs=1e-12)

    def test_constant_scores_give_half(self):
        scores = np.full((10, 3), 0.25)
        labels = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2, 0])
        rep = M.roc_auc(scores, labels)
        for curve in rep.per_class:
            assert curve.auc == pytest.approx(0.5, abs=1e-12)
            # tie grouping collapses the sweep to (0,0) -> (1,1)
            assert curve.fpr.shape == (2,)
        assert rep.micro.auc == pytest.approx(0.5, abs=1e-12)

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(11)
        for trial in range(30):
            n, k = 60, 4
            scores = rng.normal(size=(n, k))
            if trial % 2:
                scores = np.round(scores, 1)  # force plenty of ties
            labels = rng.integers(0, k, size=n)
            if np.unique(labels).size < k:
                continue
            rep = M.roc_auc(scores, labels)
            onehot = np.zeros((n, k), dtype=bool)
            onehot[np.arange(n), labels] = True
            for c in range(k):
                want = pairwise_auc(scores[:, c], labels == c)
                assert abs(rep.per_class[c].auc - want) <= 1e-12
            want = pairwise_auc(scores.ravel(), onehot.ravel())
            assert abs(rep.micro.auc - want) <= 1e-12

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=(50, 3))
        labels = rng.integers(0, 3, size=50)
        base = M.roc_auc(scores, labels)
        affine = M.roc_auc(2.0 * scores + 1.0, labels)
        cubed = M.roc_auc(scores ** 3, labels)
        for a, b, c in zip(base.per_class, affine.per_class, cubed.per_class):
            assert a.auc == b.auc == c.auc
        assert base.micro.auc == affine.micro.auc == cubed.micro.auc

    def test_curve_shape_properties(self):
        rng = np.random.default_rng(9)
        scores = rng.random((40, 3))
        labels = rng.integers(0, 3, size=40)
        rep = M.roc_auc(scores, labels)
        for curve in list(rep.per_class) + [rep.micro]:
            assert curve.fpr[0] == 0.0 and curve.tpr[0] == 0.0
            assert curve.fpr[-1] == 1.0 and curve.tpr[-1] == 1.0
            assert np.all(np.diff(curve.fpr) >= 0)
            assert np.all(np.diff(curve.tpr) >= 0)

    def test_single_class_column_is_undefined_not_a_number(self):
        scores = np.random.default_rng(0).random((8, 3))
        labels = np.array([0, 1, 0, 1, 0, 1, 0, 1])  # class 2 never occurs
        rep = M.roc_auc(scores, labels)
        assert rep.per_class[2].auc is None
        assert rep.per_class[0].auc is not None
        assert rep.micro.auc is not None

    def test_input_validation(self):
        with pytest.raises(ValueError):
            M.roc_auc(np.zeros((1, 3)), np.array([0]))
        with pytest.raises(ValueError):
            M.roc_auc(np.zeros((4, 2)), np.array([0, 1, 0, 2]))
        with pytest.raises(ValueError):
            M.roc_auc(np.full((4, 2), np.nan), np.array([0, 1, 0, 1]))


# ---------------------------------------------------------------------------
# report assembly and artifact emission
# ---------------------------------------------------------------------------

def small_report():
    rng = np.random.default_rng(21)
    labels = rng.integers(0, 3, size=90)
    scores = rng.random((90, 3)) * 0.2
    scores[np.arange(90), labels] += rng.random(90)  # mostly right, not always
    return M.evaluate(scores, labels)


class TestReportAndPlots:
    def test_evaluate_combines_counts_and_roc(self):
        rep = small_report()
        assert rep.roc is not None
        assert rep.confusion.shape == (3, 3)
        assert rep.total == 90
        assert len(rep.roc.per_class) == 3

    def test_emit_plots_writes_expected_files(self, tmp_path):
        rep = small_report()
        out = tmp_path / "made" / "on" / "demand"
        paths = M.emit_plots(rep, out)
        names = sorted(p.name for p in paths)
        assert names == ["confusion.png", "metrics.txt", "roc.png", "roc_points.txt"]
        for p in paths:
            assert p.exists() and p.stat().st_size > 0
        # one curve section per class plus the pooled one
        table = (out / "roc_points.txt").read_text()
        assert sum(line.startswith("curve ") for line in table.splitlines()) == 4

    def test_reemission_is_byte_identical(self, tmp_path):
        rep = small_report()
        a = M.emit_plots(rep, tmp_path / "a")
        b = M.emit_plots(rep, tmp_path / "b")
        for pa, pb in zip(a, b):
            assert pa.name == pb.name
            assert pa.read_bytes() == pb.read_bytes()

    def test_unwritable_target_reported(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            M.emit_plots(small_report(), blocker / "sub")

    def test_partial_report_skips_roc_outputs(self, tmp_path):
        rep = M.compute_metrics(np.diag([4, 4, 4]))
        paths = M.emit_plots(rep, tmp_path)
        names = sorted(p.name for p in paths)
        assert names == ["confusion.png", "metrics.txt"]

    def test_text_table_mentions_undefined_auc(self, tmp_path):
        scores = np.random.default_rng(1).random((10, 3))
        labels = np.array([0, 1] * 5)  # class 2 absent
        rep = M.evaluate(scores, labels)
        text = M.format_report(rep)
        assert "undefined" in text
