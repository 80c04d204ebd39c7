"""scikit-learn style wrappers around the functional core.

Video arrays are ``(n, L, H, W, C)``; these estimators accept them directly,
so they follow the fit/predict/transform protocol and ``get_params`` /
``set_params`` without claiming 2-D tabular input.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import encoder as enc
from .corpus import LabeledVideoSet, staticize_indices
from .distill import DistillConfig
from .numkit import DTYPE, ContractError, RngStream
from .partition import partition
from .policy import ActionSpace, DistillationEnvironment, RlConfig, resolve_policy, synthesize, temporal_policy_learning


def check_videos(X, *, length: int | None = None) -> np.ndarray:
    """Coerce to a finite float64 ``(n, L, H, W, C)`` array."""
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim == 4:
        X = X[..., None]
    if X.ndim != 5:
        raise ValueError(f"expected videos shaped (n, L, H, W, C), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("found an empty video array")
    if not np.all(np.isfinite(X)):
        raise ValueError("videos contain NaN or infinite values")
    if length is not None and X.shape[1] != length:
        raise ValueError(f"expected temporal length {length}, got {X.shape[1]}")
    return X


def check_video_labels(X, y, *, length: int | None = None):
    X = check_videos(X, length=length)
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != len(X):
        raise ValueError(f"y must be 1-D with {len(X)} entries, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("class labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("class labels must be non-negative")
    return X, y.astype(np.int64)


class VideoClassifier(ClassifierMixin, BaseEstimator):
    """The spatiotemporal encoder trained with softmax cross-entropy."""

    def __init__(self, iterations=1000, batch_size=16, learning_rate=0.02, momentum=0.9, seed=0):
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed

    def fit(self, X, y):
        X, y = check_video_labels(X, y)
        self.classes_ = np.arange(int(y.max()) + 1)
        cfg = enc.TrainConfig(self.iterations, self.batch_size, self.learning_rate, self.momentum, self.seed)
        result = enc.train_classifier(X, y, len(self.classes_), cfg, purpose="estimator")
        self.params_ = result.params
        self.loss_curve_ = list(result.loss_trace)
        self.n_frames_in_ = X.shape[1]
        return self

    @classmethod
    def from_params(cls, params: enc.EncoderParams, **kwargs) -> "VideoClassifier":
        """Wrap already-trained parameters (e.g. a loaded teacher)."""
        est = cls(**kwargs)
        est.params_ = params
        est.classes_ = np.arange(params.num_classes)
        est.n_frames_in_ = params.length
        est.loss_curve_ = []
        return est

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        return enc.logits(self.params_, check_videos(X, length=self.n_frames_in_))

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X):
        """64-d feature vectors."""
        check_is_fitted(self, "params_")
        return enc.features(self.params_, check_videos(X, length=self.n_frames_in_))


class TemporalPartitioner(TransformerMixin, BaseEstimator):
    """Crop to ``a`` segments and repeat each kept frame back to full length."""

    def __init__(self, a=1):
        self.a = a

    def fit(self, X, y=None):
        X = check_videos(X)
        if not 1 <= int(self.a) <= X.shape[1]:
            raise ValueError(f"a={self.a} must lie in [1, {X.shape[1]}]")
        self.n_frames_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_frames_in_")
        return partition(check_videos(X, length=self.n_frames_in_), int(self.a))


class Staticizer(TransformerMixin, BaseEstimator):
    """Replace each video by one randomly chosen frame repeated over its length."""

    def __init__(self, seed=0):
        self.seed = seed

    def fit(self, X, y=None):
        self.n_frames_in_ = check_videos(X).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_frames_in_")
        X = check_videos(X, length=self.n_frames_in_)
        picks = staticize_indices(len(X), X.shape[1], RngStream(int(self.seed)))
        return np.repeat(X[np.arange(len(X)), picks][:, None], X.shape[1], axis=1)


class DynamicAwareDistiller(BaseEstimator):
    """Per-class resolution search followed by distillation at the chosen resolutions.

    ``fit(X, y, teacher=..., X_reward=..., y_reward=...)`` learns
    ``policy_`` and ``synthetic_``; ``transform`` is not defined because the
    output (a small synthetic set) is not a row-wise map of the input.
    """

    def __init__(self, N=200, beta=0.05, lr_syn=10.0, momentum_syn=0.95, real_batch_per_class=8,
                 ipc=1, T=20, alpha=0.1, gamma=0.5, p=0.8, resolutions=(1, 2, 4, 8),
                 universal=False, probe_noise="common", seed=0):
        self.N = N
        self.beta = beta
        self.lr_syn = lr_syn
        self.momentum_syn = momentum_syn
        self.real_batch_per_class = real_batch_per_class
        self.ipc = ipc
        self.T = T
        self.alpha = alpha
        self.gamma = gamma
        self.p = p
        self.resolutions = resolutions
        self.universal = universal
        self.probe_noise = probe_noise
        self.seed = seed

    def _configs(self):
        dd = DistillConfig(self.N, self.beta, self.lr_syn, self.momentum_syn, self.real_batch_per_class, self.ipc)
        rl = RlConfig(self.T, self.alpha, self.gamma, self.p, self.seed)
        try:
            return dd.validate(), rl.validate(), ActionSpace(tuple(self.resolutions))
        except ContractError as exc:
            raise ValueError(str(exc)) from exc

    def fit(self, X, y, teacher=None, X_reward=None, y_reward=None):
        X, y = check_video_labels(X, y)
        if teacher is None:
            raise ValueError("a trained teacher (VideoClassifier or EncoderParams) is required")
        params = teacher.params_ if isinstance(teacher, VideoClassifier) else teacher
        dd, rl, actions = self._configs()
        actions.check_length(X.shape[1])
        M = int(y.max()) + 1
        real = LabeledVideoSet(X, y, "train", {"num_classes": M})
        if X_reward is None:
            reward = LabeledVideoSet(X, y, "reward", {"num_classes": M})
        else:
            Xr, yr = check_video_labels(X_reward, y_reward, length=X.shape[1])
            reward = LabeledVideoSet(Xr, yr, "reward", {"num_classes": M})
        env = DistillationEnvironment(real, reward, params, dd, RngStream(self.seed, "rl/env"),
                                      noise=self.probe_noise)
        classes = list(range(M))
        learning = temporal_policy_learning(env, classes, rl, actions, universal=self.universal)
        result, policy = synthesize(real, learning.q, dd, RngStream(self.seed, "ablation"))
        self.q_table_ = learning.q
        self.trial_log_ = learning.log_dicts()
        self.policy_ = resolve_policy(learning.q, classes)
        self.synthetic_ = result.synthetic
        self.loss_trace_ = list(result.loss_trace)
        self.dd_iterations_ = learning.dd_iterations + M * dd.N
        return self

    def synthetic_dataset(self):
        """``(videos, labels)`` of the expanded synthetic set."""
        check_is_fitted(self, "synthetic_")
        return self.synthetic_.to_training_set()


__all__ = ["DynamicAwareDistiller", "Staticizer", "TemporalPartitioner", "VideoClassifier",
           "check_video_labels", "check_videos"]
