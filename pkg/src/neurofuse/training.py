"""Two-stage training: minibatch Adamax on the fusion net, then a tree head.

Stage 1 trains the trainable tail of a :class:`FusionClassifierNet` (both
backbones stay frozen) with shuffled minibatches, cross-entropy on softmax
outputs, and on-the-fly augmentation of the training images only.  The
weights from the best validation-accuracy epoch are what the caller gets
back.  Stage 2 swaps the MLP head for gradient-boosted trees fitted on the
128-wide embeddings of the (unaugmented) training images.

Every random choice is drawn from a stream derived from the config seed, so
a rerun with the same seed reproduces the loss curves bit for bit: batch
order from one stream per epoch, per-image augmentation from a stream keyed
by (epoch, image index), dropout masks from per-layer streams seeded once at
startup.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import tensor as T
from .architecture import PRESETS, FusionClassifierNet, build_fusion_classifier
from .gbdt import BoostParams, TreeEnsemble, gbdt_fit, gbdt_predict
from .layers import Dropout, count_trainable_params
from .optim import Adamax
from .preprocess import AugmentSpec, augment
from .util import rng_for
from .validation import check_labels

__all__ = [
    "EpochStats",
    "FusionImageClassifier",
    "TrainConfig",
    "TrainReport",
    "assert_no_leakage",
    "extract_features",
    "format_train_report",
    "report_summary",
    "to_net_input",
    "train_stage1",
    "train_stage2",
]

# rng stream tags (data.py owns 40/50)
_DROPOUT_STREAM = 60
_AUG_STREAM = 61
_PERM_STREAM = 62
_ESTIMATOR_SPLIT_STREAM = 70


@dataclass(frozen=True)
class TrainConfig:
    """Stage-1 settings.  Optimizer (Adamax) and loss (categorical
    cross-entropy on softmax outputs) are fixed, not configurable."""

    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    log_cadence: int = 1  # epochs between log lines; the last epoch always logs
    augment: AugmentSpec | None = AugmentSpec()
    early_stop_val_acc: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (batch norm trains on batches)")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.log_cadence < 1:
            raise ValueError("log cadence must be >= 1")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0
    trainable_params: int = 0
    wall_clock_s: float = 0.0
    early_stopped: bool = False


def format_train_report(report: TrainReport) -> str:
    """One epoch per line, plus a short footer."""
    lines = ["epoch\ttrain_loss\ttrain_acc\tval_loss\tval_acc"]
    for e in report.epochs:
        lines.append(f"{e.epoch}\t{e.train_loss:.6f}\t{e.train_acc:.4f}"
                     f"\t{e.val_loss:.6f}\t{e.val_acc:.4f}")
    lines.append(f"best_epoch\t{report.best_epoch}")
    lines.append(f"best_val_acc\t{report.best_val_acc:.4f}")
    lines.append(f"trainable_params\t{report.trainable_params}")
    lines.append(f"wall_clock_s\t{report.wall_clock_s:.2f}")
    lines.append(f"early_stopped\t{report.early_stopped}")
    return "\n".join(lines) + "\n"


def report_summary(report: TrainReport) -> dict:
    return {
        "best_epoch": report.best_epoch,
        "best_val_acc": report.best_val_acc,
        "early_stopped": report.early_stopped,
        "epochs_run": len(report.epochs),
        "final_train_loss": report.epochs[-1].train_loss if report.epochs else None,
        "final_val_acc": report.epochs[-1].val_acc if report.epochs else None,
        "trainable_params": report.trainable_params,
        "wall_clock_s": report.wall_clock_s,
    }


# ---------------------------------------------------------------------------
# batch plumbing
# ---------------------------------------------------------------------------

def to_net_input(images: np.ndarray, channels: int) -> np.ndarray:
    """uint8 (n, h, w) -> float32 (n, h, w, c) in [0, 1]."""
    images = np.asarray(images)
    if images.ndim != 3:
        raise ValueError(f"expected (n, h, w) grayscale images, got shape {images.shape}")
    x = (images.astype(np.float32) / 255.0)[..., None]
    if channels > 1:
        x = np.repeat(x, channels, axis=3)
    return x


def net_input_channels(net: FusionClassifierNet) -> int:
    return net.residual.stem.w.data.shape[2]


def _batch_slices(n: int, batch_size: int) -> list[slice]:
    """Consecutive slices; a trailing singleton is folded into the previous
    batch so batch norm always sees at least two rows."""
    cuts = list(range(0, n, batch_size)) + [n]
    if len(cuts) > 2 and cuts[-1] - cuts[-2] == 1:
        cuts.pop(-2)
    return [slice(a, b) for a, b in zip(cuts[:-1], cuts[1:])]


def augment_batch(images: np.ndarray, idxs: np.ndarray, epoch: int,
                  cfg: TrainConfig) -> np.ndarray:
    """Assemble one training batch, augmenting each image from its own
    (seed, epoch, index) stream so batch composition cannot shift draws."""
    if cfg.augment is None:
        return images[idxs]
    out = np.empty((len(idxs),) + images.shape[1:], dtype=images.dtype)
    for row, idx in enumerate(idxs):
        rng = rng_for(cfg.seed, _AUG_STREAM, epoch, int(idx))
        out[row] = augment(images[int(idx)], cfg.augment, rng)
    return out


def _reseed_dropouts(net, seed: int) -> None:
    for i, mod in enumerate(net.modules()):
        if isinstance(mod, Dropout):
            mod.rng = rng_for(seed, _DROPOUT_STREAM, i)


def _image_digests(images: np.ndarray) -> set:
    return {hashlib.sha1(np.ascontiguousarray(img).tobytes()).digest()
            for img in images}


def assert_no_leakage(*image_sets: np.ndarray) -> None:
    """Reject byte-identical images appearing in more than one split."""
    seen: set = set()
    for images in image_sets:
        digests = _image_digests(images)
        dup = seen & digests
        if dup:
            raise ValueError("data leak: the same image appears in more than one split")
        seen |= digests


class _CachedValSet:
    """Frozen-backbone outputs for the validation images, computed once.

    Only the trainable tail is re-run per epoch; the cached arrays are exactly
    what the full forward would produce, so the scores match a from-scratch
    evaluation bit for bit.
    """

    def __init__(self, net: FusionClassifierNet, images: np.ndarray,
                 labels: np.ndarray, batch_size: int):
        channels = net_input_channels(net)
        net.eval()
        self.batches = []
        for sl in _batch_slices(len(images), batch_size):
            x = T.Tensor(to_net_input(images[sl], channels))
            res_out, taps = net.backbone_outputs(x)
            onehot = np.eye(net.n_classes, dtype=np.float32)[labels[sl]]
            self.batches.append((res_out.data, [t.data for t in taps],
                                 labels[sl], onehot))

    def evaluate(self, net: FusionClassifierNet) -> tuple[float, float]:
        net.eval()
        loss_sum, correct, n = 0.0, 0, 0
        for res_data, tap_data, labels, onehot in self.batches:
            res_out = T.Tensor(res_data)
            taps = [T.Tensor(a) for a in tap_data]
            probs = T.softmax(net.logits(net.features_from(res_out, taps)))
            loss = T.categorical_cross_entropy(probs, T.Tensor(onehot))
            loss_sum += float(loss.data) * len(labels)
            correct += int((np.argmax(probs.data, axis=1) == labels).sum())
            n += len(labels)
        return loss_sum / n, correct / n


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

def train_stage1(net: FusionClassifierNet, train_set, val_set, cfg: TrainConfig,
                 log=None) -> TrainReport:
    """Minibatch Adamax over the trainable tail; returns the epoch log.

    ``train_set`` and ``val_set`` are (uint8 images (n, h, w), labels) pairs.
    The net is left holding the weights of the best validation epoch and in
    eval mode.
    """
    if net.head != "mlp":
        raise ValueError("stage-1 training requires the MLP head")
    train_images, train_labels = train_set
    val_images, val_labels = val_set
    train_images = np.asarray(train_images)
    val_images = np.asarray(val_images)
    if len(train_images) == 0 or len(val_images) == 0:
        raise ValueError("empty dataset: need at least one train and one val image")
    if len(train_images) < 2:
        raise ValueError("need at least two training images for batch statistics")
    train_labels = check_labels(train_labels, len(train_images), "train labels")
    val_labels = check_labels(val_labels, len(val_images), "val labels")
    if max(train_labels.max(), val_labels.max()) >= net.n_classes:
        raise ValueError("label id exceeds the network's class count")
    assert_no_leakage(train_images, val_images)

    start = time.perf_counter()
    channels = net_input_channels(net)
    onehot_all = np.eye(net.n_classes, dtype=np.float32)[train_labels]
    _reseed_dropouts(net, cfg.seed)
    cached_val = _CachedValSet(net, val_images, val_labels, cfg.batch_size)
    opt = Adamax(net.trainable_parameters(), lr=cfg.lr)

    report = TrainReport(trainable_params=count_trainable_params(net))
    best_state = None
    n = len(train_images)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng_for(cfg.seed, _PERM_STREAM, epoch).permutation(n)
        net.train()
        loss_sum, correct = 0.0, 0
        for sl in _batch_slices(n, cfg.batch_size):
            idxs = perm[sl]
            batch = augment_batch(train_images, idxs, epoch, cfg)
            x = T.Tensor(to_net_input(batch, channels))
            probs = net(x)
            loss = T.categorical_cross_entropy(probs, T.Tensor(onehot_all[idxs]))
            net.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += float(loss.data) * len(idxs)
            correct += int((np.argmax(probs.data, axis=1) == train_labels[idxs]).sum())
        val_loss, val_acc = cached_val.evaluate(net)
        stats = EpochStats(epoch=epoch, train_loss=loss_sum / n, train_acc=correct / n,
                           val_loss=val_loss, val_acc=val_acc)
        report.epochs.append(stats)
        if log is not None and (epoch % cfg.log_cadence == 0 or epoch == cfg.epochs):
            log(f"epoch {epoch}/{cfg.epochs}  train_loss {stats.train_loss:.4f}  "
                f"train_acc {stats.train_acc:.4f}  val_loss {val_loss:.4f}  "
                f"val_acc {val_acc:.4f}")
        if best_state is None or val_acc > report.best_val_acc:
            report.best_val_acc = val_acc
            report.best_epoch = epoch
            best_state = net.state_dict()
        if cfg.early_stop_val_acc is not None and val_acc >= cfg.early_stop_val_acc:
            report.early_stopped = True
            break
    net.load_state(best_state)
    net.eval()
    report.wall_clock_s = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------

def extract_features(net: FusionClassifierNet, dataset,
                     batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic embeddings: infer-mode forward, no augmentation,
    one 128-wide row per image in input order."""
    images, labels = dataset
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("no images to embed")
    labels = check_labels(labels, len(images), "labels")
    channels = net_input_channels(net)
    net.eval()
    rows = []
    for start in range(0, len(images), batch_size):
        x = T.Tensor(to_net_input(images[start:start + batch_size], channels))
        rows.append(net.features(x).data)
    return np.concatenate(rows, axis=0), labels


def train_stage2(features, labels, params: BoostParams = BoostParams()) -> TreeEnsemble:
    """Fit the gradient-boosted head on stage-1 embeddings (train split only)."""
    return gbdt_fit(features, labels, params)


# ---------------------------------------------------------------------------
# sklearn-style wrapper around the whole pipeline
# ---------------------------------------------------------------------------

class FusionImageClassifier(ClassifierMixin, BaseEstimator):
    """Estimator over preprocessed grayscale images (n, h, w) uint8.

    ``fit`` carves a stratified validation split out of the provided data,
    trains the fusion net (stage 1), and, when ``head="gbdt"``, fits the
    tree ensemble on the trained embeddings (stage 2).
    """

    def __init__(self, preset: str = "tiny", tap_widths=None, n_rounds: int = 100,
                 max_depth: int = 4, eta: float = 0.3, epochs: int = 50,
                 batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
                 head: str = "gbdt", augment: bool = True,
                 early_stop_val_acc: float | None = None):
        self.preset = preset
        self.tap_widths = tap_widths
        self.n_rounds = n_rounds
        self.max_depth = max_depth
        self.eta = eta
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.head = head
        self.augment = augment
        self.early_stop_val_acc = early_stop_val_acc

    def _split_train_val(self, y: np.ndarray):
        train_idx, val_idx = [], []
        for label in range(len(self.classes_)):
            idxs = np.flatnonzero(y == label)
            perm = rng_for(self.seed, _ESTIMATOR_SPLIT_STREAM, label).permutation(len(idxs))
            n_val = max(1, len(idxs) // 10) if len(idxs) >= 2 else 0
            val_idx += list(idxs[perm[:n_val]])
            train_idx += list(idxs[perm[n_val:]])
        if not val_idx:
            raise ValueError("need at least two images in some class to form a validation split")
        return np.sort(np.array(train_idx)), np.sort(np.array(val_idx))

    def fit(self, X, y) -> "FusionImageClassifier":
        X = np.asarray(X)
        if X.ndim != 3 or X.dtype != np.uint8:
            raise ValueError("X must be (n, h, w) uint8 preprocessed images")
        y = check_labels(y, len(X), "y")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.head not in ("mlp", "gbdt"):
            raise ValueError("head must be 'mlp' or 'gbdt'")
        cfg_kwargs = {} if self.augment else {"augment": None}
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                          lr=self.lr, seed=self.seed,
                          early_stop_val_acc=self.early_stop_val_acc, **cfg_kwargs)
        net_cfg = (PRESETS[self.preset]() if self.tap_widths is None
                   else PRESETS[self.preset](tap_widths=tuple(self.tap_widths)))
        self.net_ = build_fusion_classifier(net_cfg, len(self.classes_),
                                            seed=self.seed, head="mlp")
        tr, va = self._split_train_val(y_idx)
        self.report_ = train_stage1(self.net_, (X[tr], y_idx[tr]), (X[va], y_idx[va]), cfg)
        self.ensemble_ = None
        if self.head == "gbdt":
            feats, labels = extract_features(self.net_, (X[tr], y_idx[tr]), self.batch_size)
            params = BoostParams(rounds=self.n_rounds, max_depth=self.max_depth, eta=self.eta)
            self.ensemble_ = train_stage2(feats, labels, params)
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("this FusionImageClassifier is not fitted yet; call fit first")

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        X = np.asarray(X)
        if self.ensemble_ is not None:
            feats, _ = extract_features(self.net_, (X, np.zeros(len(X), np.int64)),
                                        self.batch_size)
            return gbdt_predict(self.ensemble_, feats)
        self.net_.eval()
        channels = net_input_channels(self.net_)
        out = []
        for start in range(0, len(X), self.batch_size):
            x = T.Tensor(to_net_input(X[start:start + self.batch_size], channels))
            out.append(self.net_(x).data)
        return np.concatenate(out, axis=0)

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def score(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))
