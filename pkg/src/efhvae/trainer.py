"""Hierarchical-sampling batches, ADAM, early stopping and stage training."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch

from ._random import substream, torch_generator
from .corpus import SegmentSet
from .exceptions import ConfigurationError, DataError, DimensionError, NumericError
from .model import encode_z1, encode_z2, sample_latent
from .objective import LOSS_FIELDS, HyperConfig, LossBreakdown, segment_terms
from .seqnet import ParamStore, compute_gradients

log = logging.getLogger(__name__)

EVAL_SEED = 20211
DEFAULT_ALPHA_Z1 = 10000.0
# validation quantity used for early stopping: the bound alone, or bound plus
# the weighted discriminative terms
MONITORS = {"bound": "bound", "objective": "total"}


@dataclass
class StageConfig:
    stage: int = 1
    alpha_z1: float | None = None
    alpha_z2: float = 100.0
    K: int = 64
    minibatch_size: int = 256
    learning_rate: float = 1e-3
    max_epochs: int = 500
    patience: int = 50
    seed: int = 0
    beta1: float = 0.95
    beta2: float = 0.999
    adam_eps: float = 1e-8
    monitor: str | None = None

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError(f"stage must be 1 or 2, got {self.stage}")
        if self.stage == 1:
            self.alpha_z1 = 0.0
        elif self.alpha_z1 is None:
            self.alpha_z1 = DEFAULT_ALPHA_Z1
        if self.monitor is None:
            self.monitor = "bound" if self.stage == 1 else "objective"
        if self.monitor not in MONITORS:
            raise ConfigurationError(f"monitor must be one of {sorted(MONITORS)}, got {self.monitor!r}")
        if self.K < 1 or self.minibatch_size < 1:
            raise ConfigurationError("K and minibatch_size must be >= 1")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigurationError("max_epochs must be >= 0 and patience >= 1")
        if self.patience > max(self.max_epochs, 1):
            raise ConfigurationError("patience cannot exceed max_epochs")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# ADAM


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParamStore, beta1=0.95, beta2=0.999, eps=1e-8):
        return cls({k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()}, 0, beta1, beta2, eps)


@torch.no_grad()
def adam_step(params: ParamStore, grads: dict, state: AdamState, lr: float):
    """One bias-corrected ADAM update. Returns new ``(params, state)``;
    non-finite gradients raise before anything changes."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise DimensionError(f"gradient shape mismatch for {k}")
        if not bool(torch.isfinite(g).all()):
            raise NumericError(f"non-finite gradient for {k}")
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, m, v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        step = lr * (m[k] / c1) / (torch.sqrt(v[k] / c2) + state.eps)
        new_params[k] = p - step
    return new_params, AdamState(m, v, t, b1, b2, state.eps)


# --------------------------------------------------------------------------
# batching


def hierarchical_sample_batch(labels, K: int, rng: np.random.Generator):
    """Draw ``min(K, n_labels)`` distinct labels and return the indices of every
    segment carrying one of them, plus the sorted label set."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("cannot sample from an empty dataset")
    if K < 1:
        raise ConfigurationError("K must be >= 1")
    unique = np.unique(labels)
    chosen = np.sort(rng.choice(unique, size=min(K, len(unique)), replace=False))
    return np.flatnonzero(np.isin(labels, chosen)), chosen


class EarlyStopping:
    """Tracks the best monitored value (higher is better)."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = None

    def update(self, epoch: int, value: float) -> bool:
        if value > self.best:
            self.best, self.best_epoch = value, epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return self.best_epoch is not None and epoch - self.best_epoch >= self.patience


# --------------------------------------------------------------------------
# training


@dataclass
class _Tensors:
    x: torch.Tensor
    seq: torch.Tensor
    lab: torch.Tensor
    n_i: torch.Tensor
    s_l: torch.Tensor

    def take(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        return _Tensors(self.x[idx], self.seq[idx], self.lab[idx], self.n_i[idx], self.s_l[idx])

    def __len__(self):
        return self.x.shape[0]


def _tensors(segments: SegmentSet, seq_counts, label_counts, dtype):
    seq = np.asarray(segments.sequence_ids)
    lab = np.asarray(segments.labels)
    return _Tensors(
        torch.as_tensor(segments.data, dtype=dtype),
        torch.as_tensor(seq, dtype=torch.long),
        torch.as_tensor(lab, dtype=torch.long),
        torch.as_tensor(np.maximum(seq_counts[seq], 1), dtype=dtype),
        torch.as_tensor(np.maximum(label_counts[lab], 1), dtype=dtype),
    )


def segment_counts(train: SegmentSet, n_sequences: int, n_labels: int, extra: SegmentSet | None = None):
    """N(i) over training segments, and S(l) over training (+ ``extra``) segments."""
    seq_counts = np.bincount(train.sequence_ids, minlength=n_sequences)
    labels = train.labels if extra is None else np.concatenate([train.labels, extra.labels])
    return seq_counts, np.bincount(labels, minlength=n_labels)


@torch.no_grad()
def _infer_unseen_mu1(params, data, hyper, trained_labels, eps2, batch_size, fused):
    """Replace mu1 rows of labels never seen in training by their MAP estimate
    sum_n E[z1_n] / (S + sigma2_z1 / sigma2_mu1) over the segments in ``data``."""
    lab = data.lab
    unseen = ~torch.as_tensor(trained_labels, dtype=torch.bool)[lab]
    if not bool(unseen.any()):
        return params
    means = []
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        x = data.x[sl]
        z2 = sample_latent(encode_z2(params, x, fused=fused), eps2[sl])
        means.append(encode_z1(params, x, z2, fused=fused).mean)
    means = torch.cat(means)[unseen]
    rows = lab[unseen]
    mu1 = params["mu1"].clone()
    sums = torch.zeros_like(mu1).index_add_(0, rows, means)
    counts = torch.zeros(mu1.shape[0], dtype=mu1.dtype).index_add_(0, rows, torch.ones_like(rows, dtype=mu1.dtype))
    hit = counts > 0
    mu1[hit] = sums[hit] / (counts[hit, None] + hyper.sigma2_z1 / hyper.sigma2_mu1)
    return {**params, "mu1": mu1}


@torch.no_grad()
def evaluate_terms(params, data: _Tensors, hyper: HyperConfig, stage: int, z2_candidates,
                   eval_seed: int = EVAL_SEED, batch_size: int = 512, fused: bool = True,
                   trained_labels=None) -> LossBreakdown:
    """Mean objective terms over ``data`` with one fixed-seed posterior sample per segment.

    In stage 2, labels flagged False in ``trained_labels`` have untrained mu1
    rows; those rows are replaced by their closed-form MAP estimate first.
    """
    if len(data) == 0:
        raise DataError("validation set is empty")
    D = params["mu2"].shape[1]
    dtype = params["mu2"].dtype
    gen = torch_generator(eval_seed, "validation")
    eps2 = torch.randn(len(data), D, generator=gen, dtype=torch.float64).to(dtype)
    eps1 = torch.randn(len(data), D, generator=gen, dtype=torch.float64).to(dtype)
    z1_cands = torch.unique(data.lab)
    if trained_labels is not None and stage == 2:
        params = _infer_unseen_mu1(params, data, hyper, trained_labels, eps2, batch_size, fused)
    sums = {k: 0.0 for k in LOSS_FIELDS}
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        b = data.take(np.arange(len(data))[sl])
        terms = segment_terms(params, b.x, b.seq, b.lab, b.n_i, b.s_l, hyper, stage,
                              z2_candidates, z1_cands, eps1[sl], eps2[sl], fused=fused)
        for k in LOSS_FIELDS:
            sums[k] += float(terms[k].double().sum())
    return LossBreakdown(**{k: v / len(data) for k, v in sums.items()})


def evaluate_validation_bound(params, val: SegmentSet, hyper: HyperConfig, stage: int,
                              seq_counts, label_counts, z2_candidates=None, trained_labels=None,
                              eval_seed: int = EVAL_SEED, fused: bool = True) -> float:
    """Mean per-segment bound (no discriminative terms) on held-out segments."""
    if len(val) == 0:
        raise DataError("validation set is empty")
    dtype = params["mu2"].dtype
    if z2_candidates is None:
        z2_candidates = np.flatnonzero(seq_counts > 0)
    data = _tensors(val, seq_counts, label_counts, dtype)
    return evaluate_terms(params, data, hyper, stage, torch.as_tensor(z2_candidates),
                          eval_seed=eval_seed, fused=fused, trained_labels=trained_labels).bound


@dataclass
class TrainResult:
    params: ParamStore
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_bound: float = -math.inf
    best_score: float = -math.inf
    epochs_run: int = 0
    stopped_early: bool = False


def train_stage(init: ParamStore, train: SegmentSet, val: SegmentSet, hyper: HyperConfig,
                cfg: StageConfig, fused: bool = True, callback=None) -> TrainResult:
    """Train one stage from ``init`` and return the best-validation parameters.

    ``cfg.monitor`` picks the early-stopping quantity. Epoch 0 is the
    evaluation of ``init`` itself, so with no improvement the initial
    parameters are returned unchanged.
    """
    if cfg.stage == 2 and init is None:
        raise ConfigurationError("stage 2 requires the stage-1 checkpoint as initialization")
    if init is None:
        raise ConfigurationError("initial parameters required")
    if len(train) == 0:
        raise DataError("training set is empty")
    hyper = replace(hyper, alpha_z1=cfg.alpha_z1, alpha_z2=cfg.alpha_z2)
    n_seq, n_lab = init["mu2"].shape[0], init["mu1"].shape[0]
    if train.sequence_ids.max() >= n_seq or train.labels.max() >= n_lab:
        raise DataError("segments reference rows outside the mu tables")
    dtype = init["mu2"].dtype
    seq_counts, label_counts = segment_counts(train, n_seq, n_lab, extra=val)
    tr = _tensors(train, seq_counts, label_counts, dtype)
    va = _tensors(val, seq_counts, label_counts, dtype)
    z2_cands = torch.as_tensor(np.flatnonzero(seq_counts > 0))
    trained_labels = np.bincount(train.labels, minlength=n_lab) > 0

    batch_rng = substream(cfg.seed, "batching", cfg.stage)
    eps_gen = torch_generator(cfg.seed, "reparameterization", cfg.stage)
    D = init["mu2"].shape[1]

    params = {k: v.clone() for k, v in init.items()}
    state = AdamState.zeros_like(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    stopper = EarlyStopping(cfg.patience)
    result = TrainResult(params={k: v.clone() for k, v in params.items()})

    val0 = evaluate_terms(params, va, hyper, cfg.stage, z2_cands, fused=fused,
                          trained_labels=trained_labels)
    key = MONITORS[cfg.monitor]
    stopper.update(0, getattr(val0, key))
    result.history.append({"epoch": 0, "split": "val", **val0.as_dict()})
    result.best_bound, result.best_score = val0.bound, getattr(val0, key)

    n_super = math.ceil(len(np.unique(train.labels)) / cfg.K)
    for epoch in range(1, cfg.max_epochs + 1):
        sums = {k: 0.0 for k in LOSS_FIELDS}
        seen = 0
        for _ in range(n_super):
            idx, cands = hierarchical_sample_batch(train.labels, cfg.K, batch_rng)
            idx = batch_rng.permutation(idx)
            cands = torch.as_tensor(cands)
            for start in range(0, len(idx), cfg.minibatch_size):
                b = tr.take(idx[start:start + cfg.minibatch_size])
                eps2 = torch.randn(len(b), D, generator=eps_gen, dtype=torch.float64).to(dtype)
                eps1 = torch.randn(len(b), D, generator=eps_gen, dtype=torch.float64).to(dtype)
                captured = {}

                def loss_fn(p):
                    terms = segment_terms(p, b.x, b.seq, b.lab, b.n_i, b.s_l, hyper, cfg.stage,
                                          z2_cands, cands, eps1, eps2, fused=fused)
                    captured.update(terms)
                    return -terms["total"].mean()

                _, grads = compute_gradients(loss_fn, params)
                params, state = adam_step(params, grads, state, cfg.learning_rate)
                for k in LOSS_FIELDS:
                    sums[k] += float(captured[k].detach().double().sum())
                seen += len(b)
        train_row = {k: v / seen for k, v in sums.items()}
        result.history.append({"epoch": epoch, "split": "train", **train_row})
        val_terms = evaluate_terms(params, va, hyper, cfg.stage, z2_cands, fused=fused,
                          trained_labels=trained_labels)
        result.history.append({"epoch": epoch, "split": "val", **val_terms.as_dict()})
        result.epochs_run = epoch
        score = getattr(val_terms, key)
        if stopper.update(epoch, score):
            result.params = {k: v.clone() for k, v in params.items()}
            result.best_bound, result.best_score, result.best_epoch = val_terms.bound, score, epoch
        log.info("stage %d epoch %d: train total %.3f, val bound %.3f, val %s %.3f (best @ %d)",
                 cfg.stage, epoch, train_row["total"], val_terms.bound, cfg.monitor, score, stopper.best_epoch)
        if callback is not None:
            callback(epoch, params, result)
        if stopper.should_stop(epoch):
            result.stopped_early = True
            break
    return result
