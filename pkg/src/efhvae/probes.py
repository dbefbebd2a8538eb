"""Probe classifiers and statistics for measuring disentanglement.

* subject probe: softmax regression on frozen latents
* binary content probe: linear SVM between temporally adjacent content labels
* raw baseline: the same SVM protocol on flattened segments
* paired Wilcoxon signed-rank test (normal approximation)
"""
from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import norm
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._random import substream
from .corpus import TEST, TRAIN, VAL, LabelIndex, SegmentSet
from .exceptions import ConfigurationError, DataError
from .trainer import AdamState, adam_step


@dataclass
class LatentTable:
    segment_id: np.ndarray
    sequence_id: np.ndarray
    subject_id: np.ndarray
    content_label: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    split: np.ndarray = None

    def __len__(self):
        return len(self.segment_id)

    def space(self, name: str) -> np.ndarray:
        if name not in ("z1", "z2"):
            raise ValueError(f"latent space must be 'z1' or 'z2', got {name!r}")
        return self.z1 if name == "z1" else self.z2

    def subset(self, mask) -> "LatentTable":
        split = None if self.split is None else self.split[mask]
        return LatentTable(self.segment_id[mask], self.sequence_id[mask], self.subject_id[mask],
                           self.content_label[mask], self.z1[mask], self.z2[mask], split)


@dataclass
class ProbeResult:
    accuracy: float
    per_class_accuracy: dict
    n_classes: int
    chance: float


@dataclass
class ContentEvalResult:
    accuracy: float
    pair_accuracies: dict = field(default_factory=dict)  # (label_a, label_b) -> mean fold accuracy
    skipped: list = field(default_factory=list)


def infer_latents(model, segments: SegmentSet) -> LatentTable:
    """Posterior means for every segment (z1 conditioned on the z2 mean)."""
    z1, z2 = model.encode(segments.data)
    return LatentTable(np.arange(len(segments)), np.asarray(segments.sequence_ids),
                       np.asarray(segments.subject_ids), np.asarray(segments.labels), z1, z2,
                       np.asarray(segments.split))


# --------------------------------------------------------------------------
# subject probe


class SoftmaxProbe(ClassifierMixin, BaseEstimator):
    """One affine layer with softmax output, trained with ADAM on cross-entropy.

    With ``standardize`` features are scaled by training statistics. When a
    held-out set is given, training stops after ``patience`` epochs without
    an accuracy improvement and the best weights are kept.
    """

    def __init__(self, learning_rate=1e-3, max_epochs=200, patience=20, batch_size=64, standardize=True,
                 random_state=0):
        self.standardize = standardize
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.random_state = random_state

    def _logits(self, params, X):
        return X @ params["w"].T + params["b"]

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ConfigurationError("subject probe needs at least two classes")
        d = X.shape[1]
        self.mean_ = X.mean(axis=0) if self.standardize else np.zeros(d)
        self.scale_ = np.maximum(X.std(axis=0), 1e-8) if self.standardize else np.ones(d)
        Xt = torch.as_tensor((X - self.mean_) / self.scale_)
        yt = torch.as_tensor(np.searchsorted(self.classes_, y))
        monitor = X_val is not None
        if monitor:
            X_val, y_val = check_X_y(X_val, y_val, dtype=np.float64)

        K = len(self.classes_)
        params = {"w": torch.zeros(K, d, dtype=torch.float64), "b": torch.zeros(K, dtype=torch.float64)}
        state = AdamState.zeros_like(params, 0.9, 0.999)
        rng = substream(self.random_state, "softmax-probe")
        best, best_epoch, best_params = -1.0, 0, params
        for epoch in range(1, self.max_epochs + 1):
            order = rng.permutation(len(Xt))
            for start in range(0, len(order), self.batch_size):
                idx = torch.as_tensor(order[start:start + self.batch_size])
                leaves = {k: v.clone().requires_grad_(True) for k, v in params.items()}
                loss = torch.nn.functional.cross_entropy(self._logits(leaves, Xt[idx]), yt[idx])
                grads = dict(zip(leaves, torch.autograd.grad(loss, list(leaves.values()))))
                params, state = adam_step(params, grads, state, self.learning_rate)
            if monitor:
                self.coef_, self.intercept_ = params["w"].numpy(), params["b"].numpy()
                acc = self.score(X_val, y_val)
                if acc > best:
                    best, best_epoch, best_params = acc, epoch, params
                elif epoch - best_epoch >= self.patience:
                    break
            else:
                best_params = params
        self.coef_ = best_params["w"].numpy().copy()
        self.intercept_ = best_params["b"].numpy().copy()
        self.n_epochs_ = epoch
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return ((X - self.mean_) / self.scale_) @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        s = self.decision_function(X)
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def train_subject_probe(latents: LatentTable, space: str, splits=None, random_state=0, **probe_kw) -> ProbeResult:
    """Fit on the training split, early-stop on validation, report test accuracy."""
    splits = latents.split if splits is None else np.asarray(splits)
    if splits is None:
        raise DataError("split assignment required for the subject probe")
    X, y = latents.space(space), latents.subject_id
    classes = np.unique(y)
    if len(classes) < 2:
        raise ConfigurationError("subject probe needs at least two subjects")
    tr, va, te = splits == TRAIN, splits == VAL, splits == TEST
    probe = SoftmaxProbe(random_state=random_state, **probe_kw)
    if va.any():
        probe.fit(X[tr], y[tr], X[va], y[va])
    else:
        probe.fit(X[tr], y[tr])
    pred = probe.predict(X[te])
    correct = pred == y[te]
    per_class = {int(c): float(correct[y[te] == c].mean()) for c in classes if (y[te] == c).any()}
    return ProbeResult(float(correct.mean()), per_class, len(classes), 1.0 / len(classes))


# --------------------------------------------------------------------------
# linear SVM


class LinearSVM(ClassifierMixin, BaseEstimator):
    """Binary linear SVM, ``min 1/2 ||w||^2 + C sum_i hinge(y_i (w.x_i + b))``.

    Solved by deterministic full-batch subgradient descent on the equivalent
    objective scaled by ``1/(C n)`` with step ``1/(lambda t)``, projection onto
    the ball that contains the optimum, and averaging of the second half of
    the iterates.
    """

    def __init__(self, C=1.0, n_iter=2000):
        self.C = C
        self.n_iter = n_iter

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) != 2:
            raise ConfigurationError(f"linear SVM needs exactly two classes, got {len(self.classes_)}")
        s = np.where(y == self.classes_[1], 1.0, -1.0)
        n, d = X.shape
        lam = 1.0 / (self.C * n)
        radius = 1.0 / math.sqrt(lam)
        w, b = np.zeros(d), 0.0
        w_sum, b_sum, count = np.zeros(d), 0.0, 0
        half = self.n_iter // 2
        for t in range(1, self.n_iter + 1):
            viol = s * (X @ w + b) < 1.0
            gw = lam * w - (s[viol, None] * X[viol]).sum(axis=0) / n
            gb = -s[viol].sum() / n
            eta = 1.0 / (lam * t)
            w = w - eta * gw
            b = b - eta * gb
            nw = np.linalg.norm(w)
            if nw > radius:
                w *= radius / nw
            if t > half:
                w_sum += w
                b_sum += b
                count += 1
        self.coef_ = w_sum / count
        self.intercept_ = b_sum / count
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return check_array(X, dtype=np.float64) @ self.coef_ + self.intercept_

    def predict(self, X):
        return np.where(self.decision_function(X) > 0, self.classes_[1], self.classes_[0])

    def objective(self, X, y):
        s = np.where(np.asarray(y) == self.classes_[1], 1.0, -1.0)
        hinge = np.maximum(0.0, 1.0 - s * self.decision_function(X))
        return 0.5 * self.coef_ @ self.coef_ + self.C * hinge.sum()


def train_linear_svm(X, y, C_reg=1.0, n_iter=2000) -> LinearSVM:
    return LinearSVM(C=C_reg, n_iter=n_iter).fit(X, y)


# --------------------------------------------------------------------------
# binary content classification


def adjacent_label_pairs(label_index: LabelIndex, present=None):
    """Pairs ``(l_k, l_{k+1})`` of consecutive windows within one stimulus."""
    present = None if present is None else set(int(l) for l in present)
    lookup = label_index.lookup()
    pairs = []
    for l, (s, o) in enumerate(zip(label_index.stimulus_ids, label_index.offsets)):
        nxt = lookup.get((int(s), int(o) + 1))
        if nxt is None:
            continue
        if present is not None and (l not in present or nxt not in present):
            continue
        pairs.append((l, nxt))
    return pairs


def _grouped_folds(y, groups, n_folds, rng):
    """Fold id per example. Groups (subjects) are permuted and cut into
    ``n_folds`` blocks, so one subject's examples of both classes always land
    in the same fold."""
    uniq = rng.permutation(np.unique(groups))
    fold_of = {}
    for f, block in enumerate(np.array_split(uniq, n_folds)):
        for g in block:
            fold_of[g] = f
    return np.array([fold_of[g] for g in groups], dtype=np.int64)


def pairwise_svm_eval(features, labels, pairs, groups=None, seed=0, n_folds=5, C_reg=1.0,
                      min_per_class=5, n_iter=2000) -> ContentEvalResult:
    """Shared harness: for each label pair, k-fold linear-SVM test accuracy.

    ``groups`` (subject ids) keep parallel examples of one subject together;
    without them every example is its own group. Fold assignment depends only
    on ``(seed, pair, groups)``, so runs over different feature sets with the
    same rows get identical folds.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    groups = np.arange(len(labels)) if groups is None else np.asarray(groups)
    result = ContentEvalResult(float("nan"))
    for a, b in pairs:
        rows = np.flatnonzero((labels == a) | (labels == b))
        y = labels[rows]
        if min((y == a).sum(), (y == b).sum()) < min_per_class:
            result.skipped.append((int(a), int(b)))
            continue
        folds = _grouped_folds(y, groups[rows], n_folds, substream(seed, "content-folds", int(a), int(b)))
        accs = []
        for f in range(n_folds):
            te = folds == f
            if not te.any() or len(np.unique(y[~te])) < 2:
                continue
            svm = LinearSVM(C=C_reg, n_iter=n_iter).fit(features[rows[~te]], y[~te])
            accs.append(float((svm.predict(features[rows[te]]) == y[te]).mean()))
        result.pair_accuracies[(int(a), int(b))] = float(np.mean(accs))
    if result.pair_accuracies:
        result.accuracy = float(np.mean(list(result.pair_accuracies.values())))
    return result


def binary_content_eval(latents: LatentTable, space: str, label_index: LabelIndex, seed=0, **kw) -> ContentEvalResult:
    pairs = adjacent_label_pairs(label_index, np.unique(latents.content_label))
    return pairwise_svm_eval(latents.space(space), latents.content_label, pairs,
                             groups=latents.subject_id, seed=seed, **kw)


def raw_baseline(segments: SegmentSet, label_index: LabelIndex, seed=0, **kw) -> ContentEvalResult:
    """Same protocol as :func:`binary_content_eval` on flattened ``T*C`` segments."""
    flat = np.asarray(segments.data).reshape(len(segments), -1)
    pairs = adjacent_label_pairs(label_index, np.unique(segments.labels))
    return pairwise_svm_eval(flat, segments.labels, pairs, groups=segments.subject_ids, seed=seed, **kw)


# --------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class WilcoxonResult:
    W: float
    z: float
    p: float
    n: int
    w_plus: float
    w_minus: float


def _average_ranks(values):
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def wilcoxon_signed_rank(a, b, correction: bool = True) -> WilcoxonResult:
    """Paired Wilcoxon signed-rank test with the normal approximation.

    Zero differences are dropped and tied ``|d|`` get average ranks.
    ``W = min(W+, W-)``; with ``correction`` the statistic is moved 0.5
    towards the null mean before standardizing (continuity correction).
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError("paired samples must be 1-d and of equal length")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise DataError("all paired differences are zero; the test is undefined")
    ranks = _average_ranks(np.abs(d))
    w_plus, w_minus = float(ranks[d > 0].sum()), float(ranks[d < 0].sum())
    W = min(w_plus, w_minus)
    mean = n * (n + 1) / 4.0
    sd = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0)
    num = W - mean
    if correction:
        num = min(num + 0.5, 0.0)
    z = num / sd
    z = z if w_plus >= w_minus else -z
    p = min(1.0, 2.0 * norm.sf(abs(z)))
    return WilcoxonResult(W, z, p, n, w_plus, w_minus)


# --------------------------------------------------------------------------
# export


def export_latents(latents: LatentTable, path) -> None:
    """CSV with ids followed by z1_* and z2_* columns (written atomically)."""
    if len(latents) == 0:
        raise DataError("latent table is empty")
    path = Path(path)
    D1, D2 = latents.z1.shape[1], latents.z2.shape[1]
    header = (["segment_id", "sequence_id", "subject_id", "content_label"]
              + [f"z1_{k}" for k in range(D1)] + [f"z2_{k}" for k in range(D2)])
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}-", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(len(latents)):
                w.writerow([int(latents.segment_id[i]), int(latents.sequence_id[i]),
                            int(latents.subject_id[i]), int(latents.content_label[i])]
                           + [f"{v:.9g}" for v in latents.z1[i]] + [f"{v:.9g}" for v in latents.z2[i]])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_latents(path) -> LatentTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=np.float64)
    z1_cols = [i for i, h in enumerate(header) if h.startswith("z1_")]
    z2_cols = [i for i, h in enumerate(header) if h.startswith("z2_")]
    ints = body[:, :4].astype(np.int64)
    return LatentTable(ints[:, 0], ints[:, 1], ints[:, 2], ints[:, 3], body[:, z1_cols], body[:, z2_cols])
