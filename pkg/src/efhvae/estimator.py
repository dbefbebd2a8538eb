"""scikit-learn style front end for the (extended) FHVAE."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .corpus import SegmentSet
from .exceptions import ConfigurationError, DataError
from .model import Architecture, encode_z1, encode_z2
from .objective import HyperConfig
from .seqnet import init_params, load_checkpoint, save_checkpoint
from .trainer import StageConfig, evaluate_validation_bound, train_stage
from ._random import seed_sequence


def check_segments(X, n_channels=None):
    """Validate a ``(n_segments, n_frames, n_channels)`` float array."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
    if X.ndim != 3:
        raise DataError(f"expected (n_segments, n_frames, n_channels), got shape {X.shape}")
    if n_channels is not None and X.shape[2] != n_channels:
        raise DataError(f"segments have {X.shape[2]} channels, model was fit on {n_channels}")
    return X


def _segment_set(X, sequences, labels):
    sequences = np.asarray(sequences, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if not (len(X) == len(sequences) == len(labels)):
        raise DataError("X, sequences and labels must have the same length")
    zeros = np.zeros(len(X), dtype=np.int64)
    return SegmentSet(X, sequences, zeros, zeros, zeros, labels)


class FHVAE(TransformerMixin, BaseEstimator):
    """Factorized hierarchical VAE over fixed-length multichannel segments.

    ``stage=1`` trains the plain FHVAE (zero-mean z1 prior). ``stage=2`` is the
    extended model with a content-dependent z1 prior and must be warm-started
    from a stage-1 model via ``fit(..., init=...)``.

    ``transform`` returns posterior means ``[z1 | z2]`` per segment.
    """

    def __init__(self, stage=1, hidden_size=128, n_layers=2, latent_dim=32,
                 sigma2_z1=0.25, sigma2_z2=0.25, sigma2_mu1=1.0, sigma2_mu2=1.0,
                 alpha_z1=10000.0, alpha_z2=100.0, n_labels_per_batch=64, minibatch_size=256,
                 learning_rate=1e-3, beta1=0.95, beta2=0.999, max_epochs=500, patience=50,
                 monitor=None, random_state=0, fused=True):
        self.stage = stage
        self.hidden_size = hidden_size
        self.n_layers = n_layers
        self.latent_dim = latent_dim
        self.sigma2_z1 = sigma2_z1
        self.sigma2_z2 = sigma2_z2
        self.sigma2_mu1 = sigma2_mu1
        self.sigma2_mu2 = sigma2_mu2
        self.alpha_z1 = alpha_z1
        self.alpha_z2 = alpha_z2
        self.n_labels_per_batch = n_labels_per_batch
        self.minibatch_size = minibatch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.max_epochs = max_epochs
        self.patience = patience
        self.monitor = monitor
        self.random_state = random_state
        self.fused = fused

    def hyper_config(self) -> HyperConfig:
        return HyperConfig(self.sigma2_z1, self.sigma2_z2, self.sigma2_mu1, self.sigma2_mu2,
                           self.alpha_z1, self.alpha_z2, self.latent_dim)

    def stage_config(self) -> StageConfig:
        return StageConfig(stage=self.stage, alpha_z1=self.alpha_z1, alpha_z2=self.alpha_z2,
                           K=self.n_labels_per_batch, minibatch_size=self.minibatch_size,
                           learning_rate=self.learning_rate, max_epochs=self.max_epochs,
                           patience=min(self.patience, max(self.max_epochs, 1)),
                           seed=self.random_state, beta1=self.beta1, beta2=self.beta2,
                           monitor=self.monitor)

    def _architecture(self, n_channels, n_frames, n_sequences, n_labels):
        return Architecture(n_channels, n_sequences, n_labels, self.hidden_size,
                            self.n_layers, self.latent_dim, n_frames)

    def fit(self, X, sequences, labels, X_val=None, sequences_val=None, labels_val=None,
            init=None, n_sequences=None, n_labels=None):
        """Train on segments ``X`` with their sequence ids and content labels.

        ``init`` may be a fitted :class:`FHVAE` or a parameter store; it is
        required for stage 2. Without a validation set the training segments
        are used for early stopping.
        """
        X = check_segments(X)
        train = _segment_set(X, sequences, labels)
        if X_val is None:
            val = train
        else:
            val = _segment_set(check_segments(X_val, X.shape[2]), sequences_val, labels_val)
        if isinstance(init, FHVAE):
            check_is_fitted(init, "params_")
            init = init.params_
        if self.stage == 2 and init is None:
            raise ConfigurationError("stage 2 requires a stage-1 model or checkpoint as init")

        if init is not None:
            n_sequences, n_labels = init["mu2"].shape[0], init["mu1"].shape[0]
        else:
            all_seq = np.concatenate([train.sequence_ids, val.sequence_ids])
            all_lab = np.concatenate([train.labels, val.labels])
            n_sequences = n_sequences or int(all_seq.max()) + 1
            n_labels = n_labels or int(all_lab.max()) + 1
        self.arch_ = self._architecture(X.shape[2], X.shape[1], n_sequences, n_labels)
        if init is None:
            seed = int(seed_sequence(self.random_state, "init").generate_state(1)[0])
            init = init_params(self.arch_.param_spec(), seed)
        else:
            expected = {k: shape for k, (shape, _) in self.arch_.param_spec().items()}
            got = {k: tuple(v.shape) for k, v in init.items()}
            if expected != got:
                raise ConfigurationError("init parameters do not match this architecture")

        result = train_stage(init, train, val, self.hyper_config(), self.stage_config(),
                             fused=self.fused)
        self.params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.best_bound_ = result.best_bound
        self.best_score_ = result.best_score
        self.stopped_early_ = result.stopped_early
        self.n_epochs_ = result.epochs_run
        self.n_channels_ = X.shape[2]
        return self

    @torch.no_grad()
    def encode(self, X, batch_size=1024):
        """Posterior means ``(z1, z2)``; z1 is conditioned on the z2 mean."""
        check_is_fitted(self, "params_")
        X = check_segments(X, self.n_channels_)
        dtype = self.params_["mu2"].dtype
        z1s, z2s = [], []
        for start in range(0, len(X), batch_size):
            x = torch.as_tensor(X[start:start + batch_size], dtype=dtype)
            z2 = encode_z2(self.params_, x, fused=self.fused).mean
            z1 = encode_z1(self.params_, x, z2, fused=self.fused).mean
            z1s.append(z1.double().numpy())
            z2s.append(z2.double().numpy())
        D = self.arch_.latent_dim
        if not z1s:
            return np.zeros((0, D)), np.zeros((0, D))
        return np.concatenate(z1s), np.concatenate(z2s)

    def transform(self, X):
        z1, z2 = self.encode(X)
        return np.hstack([z1, z2])

    def score(self, X, sequences, labels, n_train_segments=None):
        """Mean segment lower bound (without discriminative terms)."""
        check_is_fitted(self, "params_")
        X = check_segments(X, self.n_channels_)
        val = _segment_set(X, sequences, labels)
        seq_counts = n_train_segments
        if seq_counts is None:
            seq_counts = np.bincount(val.sequence_ids, minlength=self.arch_.n_sequences)
        label_counts = np.bincount(val.labels, minlength=self.arch_.n_labels)
        return evaluate_validation_bound(self.params_, val, self.hyper_config(), self.stage,
                                         seq_counts, label_counts, fused=self.fused)

    # ------------------------------------------------------------------
    def save(self, path):
        check_is_fitted(self, "params_")
        meta = {"architecture": self.arch_.to_dict(), "stage": self.stage,
                "estimator": {k: v for k, v in self.get_params().items()},
                "best_epoch": self.best_epoch_, "best_bound": self.best_bound_,
                "best_score": self.best_score_, "stopped_early": self.stopped_early_}
        save_checkpoint(path, self.params_, meta)

    @classmethod
    def load(cls, path):
        params, meta = load_checkpoint(path)
        if meta is None:
            raise DataError(f"{path}: missing model.json sidecar")
        known = cls().get_params()
        est = cls(**{k: v for k, v in meta["estimator"].items() if k in known})
        est.arch_ = Architecture(**meta["architecture"])
        est.params_ = params
        est.n_channels_ = est.arch_.n_channels
        est.history_ = []
        est.best_epoch_ = meta.get("best_epoch")
        est.best_bound_ = meta.get("best_bound")
        est.best_score_ = meta.get("best_score")
        est.stopped_early_ = meta.get("stopped_early")
        est.n_epochs_ = None
        return est
