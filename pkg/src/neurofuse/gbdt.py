"""Gradient-boosted decision trees with a softmax objective.

Each boosting round fits one regression tree per class to the first- and
second-order derivatives of the multiclass cross-entropy (g = p - y,
h = p(1 - p), all classes differentiated at the round's starting scores).
Splits come from exact greedy enumeration: every distinct midpoint of every
feature is scored by the regularized gain

    gain = 1/2 * (GL^2/(HL+lambda) + GR^2/(HR+lambda) - G^2/(H+lambda)) - gamma

and the winner is deterministic, breaking ties toward the lowest feature
index and then the lowest threshold. Leaves carry -G/(H+lambda).

The wire format ("BTGB") is a little-endian node table with a trailing CRC32.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .validation import check_feature_matrix, check_labels


@dataclass(frozen=True)
class BoostParams:
    rounds: int = 100
    max_depth: int = 4
    eta: float = 0.3
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        for name in ("max_depth", "eta", "reg_lambda", "gamma", "min_child_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class Tree:
    """Flat node table; feature == -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int32)
        while True:
            internal = self.feature[node] >= 0
            if not internal.any():
                return self.value[node]
            rows = np.nonzero(internal)[0]
            cur = node[rows]
            goes_left = X[rows, self.feature[cur]] < self.threshold[cur]
            node[rows] = np.where(goes_left, self.left[cur], self.right[cur])

    def n_nodes(self) -> int:
        return len(self.feature)


@dataclass
class TreeEnsemble:
    n_classes: int
    n_features: int
    eta: float
    base_score: float = 0.0
    trees: list = field(default_factory=list)  # [round][class] -> Tree

    def scores(self, X: np.ndarray) -> np.ndarray:
        out = np.full((X.shape[0], self.n_classes), self.base_score, dtype=np.float64)
        for round_trees in self.trees:
            for k, tree in enumerate(round_trees):
                out[:, k] += self.eta * tree.predict(X)
        return out


# -- tree growing -------------------------------------------------------------


@dataclass(frozen=True)
class _Split:
    feature: int
    threshold: float
    gain: float


def _best_split(X, g, h, idx, params: BoostParams, G: float, H: float) -> _Split | None:
    lam, mcw = params.reg_lambda, params.min_child_weight
    Xn = X[idx]
    order = np.argsort(Xn, axis=0, kind="stable")
    Xs = np.take_along_axis(Xn, order, axis=0)
    gs = g[idx][order]
    hs = h[idx][order]
    GL = np.cumsum(gs, axis=0)[:-1]
    HL = np.cumsum(hs, axis=0)[:-1]
    GR, HR = G - GL, H - HL
    parent = G * G / (H + lam)
    gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent) - params.gamma
    valid = (Xs[1:] > Xs[:-1]) & (HL >= mcw) & (HR >= mcw)
    gain = np.where(valid, gain, -np.inf)
    best = gain.max()
    if not np.isfinite(best) or best <= 0.0:
        return None
    rows, cols = np.nonzero(gain == best)
    thresholds = (Xs[rows, cols] + Xs[rows + 1, cols]) / 2.0
    pick = np.lexsort((thresholds, cols))[0]
    return _Split(int(cols[pick]), float(thresholds[pick]), float(best))


def _grow_tree(X, g, h, params: BoostParams) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def add_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    def build(idx: np.ndarray, depth: int) -> int:
        node = add_node()
        G, H = float(g[idx].sum()), float(h[idx].sum())
        split = None
        if depth < params.max_depth and idx.size >= 2:
            split = _best_split(X, g, h, idx, params, G, H)
        if split is None:
            value[node] = -G / (H + params.reg_lambda)
            return node
        goes_left = X[idx, split.feature] < split.threshold
        feature[node] = split.feature
        threshold[node] = split.threshold
        left[node] = build(idx[goes_left], depth + 1)
        right[node] = build(idx[~goes_left], depth + 1)
        return node

    build(np.arange(X.shape[0]), 0)
    return Tree(
        np.asarray(feature, dtype=np.int32),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int32),
        np.asarray(right, dtype=np.int32),
        np.asarray(value, dtype=np.float64),
    )


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def gbdt_fit(features, labels, params: BoostParams = BoostParams()) -> TreeEnsemble:
    X = check_feature_matrix(np.asarray(getattr(features, "data", features), dtype=np.float64))
    y = check_labels(labels, X.shape[0])
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("training labels contain a single class; nothing to separate")
    k_count = int(classes.max()) + 1
    onehot = np.zeros((X.shape[0], k_count), dtype=np.float64)
    onehot[np.arange(X.shape[0]), y] = 1.0

    ensemble = TreeEnsemble(k_count, X.shape[1], params.eta)
    scores = np.zeros((X.shape[0], k_count), dtype=np.float64)
    for _ in range(params.rounds):
        p = _softmax_rows(scores)
        g_all = p - onehot
        h_all = p * (1.0 - p)
        round_trees = []
        for k in range(k_count):
            tree = _grow_tree(X, g_all[:, k], h_all[:, k], params)
            round_trees.append(tree)
            scores[:, k] += params.eta * tree.predict(X)
        ensemble.trees.append(round_trees)
    return ensemble


def gbdt_predict(ensemble: TreeEnsemble, features) -> np.ndarray:
    X = np.asarray(getattr(features, "data", features), dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != ensemble.n_features:
        raise ValueError(f"feature width {X.shape[1] if X.ndim == 2 else X.shape} does not match "
                         f"the {ensemble.n_features} the ensemble was trained on")
    return _softmax_rows(ensemble.scores(X))


# -- serialization --------------------------------------------------------------

_MAGIC = b"BTGB"
_VERSION = 1


def gbdt_serialize(ensemble: TreeEnsemble) -> bytes:
    parts = [_MAGIC, struct.pack("<IIII", _VERSION, ensemble.n_classes, len(ensemble.trees), ensemble.n_features)]
    parts.append(struct.pack("<dd", ensemble.eta, ensemble.base_score))
    for round_trees in ensemble.trees:
        for tree in round_trees:
            parts.append(struct.pack("<I", tree.n_nodes()))
            for i in range(tree.n_nodes()):
                parts.append(
                    struct.pack(
                        "<idiid",
                        int(tree.feature[i]),
                        float(tree.threshold[i]),
                        int(tree.left[i]),
                        int(tree.right[i]),
                        float(tree.value[i]),
                    )
                )
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def gbdt_deserialize(blob: bytes) -> TreeEnsemble:
    if len(blob) < 4 + 16 + 16 + 4:
        raise ValueError("ensemble payload is truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ValueError("ensemble payload failed its checksum; file is corrupted")
    if body[:4] != _MAGIC:
        raise ValueError(f"not an ensemble file (magic {body[:4]!r})")
    version, k, rounds, n_features = struct.unpack("<IIII", body[4:20])
    if version != _VERSION:
        raise ValueError(f"unsupported ensemble format version {version}")
    eta, base = struct.unpack("<dd", body[20:36])
    offset = 36
    ensemble = TreeEnsemble(k, n_features, eta, base)
    node_fmt = struct.Struct("<idiid")
    for _ in range(rounds):
        round_trees = []
        for _ in range(k):
            (n_nodes,) = struct.unpack_from("<I", body, offset)
            offset += 4
            feature = np.empty(n_nodes, dtype=np.int32)
            threshold = np.empty(n_nodes, dtype=np.float64)
            left = np.empty(n_nodes, dtype=np.int32)
            right = np.empty(n_nodes, dtype=np.int32)
            value = np.empty(n_nodes, dtype=np.float64)
            for i in range(n_nodes):
                feature[i], threshold[i], left[i], right[i], value[i] = node_fmt.unpack_from(body, offset)
                offset += node_fmt.size
            round_trees.append(Tree(feature, threshold, left, right, value))
        ensemble.trees.append(round_trees)
    if offset != len(body):
        raise ValueError("ensemble payload has trailing bytes")
    return ensemble


# -- estimator ---------------------------------------------------------------------


class GradientBoostedTreesClassifier(ClassifierMixin, BaseEstimator):
    """sklearn-style wrapper over the boosted-tree functions."""

    def __init__(self, rounds=100, max_depth=4, eta=0.3, reg_lambda=1.0, gamma=0.0, min_child_weight=1.0):
        self.rounds = rounds
        self.max_depth = max_depth
        self.eta = eta
        self.reg_lambda = reg_lambda
        self.gamma = gamma
        self.min_child_weight = min_child_weight

    def _params(self) -> BoostParams:
        return BoostParams(
            rounds=self.rounds,
            max_depth=self.max_depth,
            eta=self.eta,
            reg_lambda=self.reg_lambda,
            gamma=self.gamma,
            min_child_weight=self.min_child_weight,
        )

    def fit(self, X, y):
        X = check_feature_matrix(X)
        y = check_labels(y, X.shape[0])
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.ensemble_ = gbdt_fit(X, encoded, self._params())
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "ensemble_"):
            raise NotFittedError("this classifier has not been fitted; call fit first")

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        return gbdt_predict(self.ensemble_, check_feature_matrix(X))

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
