"""scikit-learn style wrappers: a pretrained feature extractor and a probe classifier.

Both take ``X`` as a list of (N_i, 3) arrays (or one (n, N, 3) array)::

    enc = RIMAE(config=desk_config(), seed=0).fit(clouds)
    clf = RIMAEClassifier(encoder=enc).fit(train_clouds, y)
    clf.score(test_clouds, y_test)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import Config, config_from_dict, desk_config
from .train import encode_clouds, fit_head, load_pretrain_checkpoint, pool_latents, pretrain, save_pretrain_checkpoint
from .validation import check_labels, check_point_clouds


def _resolve_config(config, seed):
    if config is None:
        cfg = desk_config()
    elif isinstance(config, Config):
        cfg = config
    elif isinstance(config, dict):
        cfg = config_from_dict(config)
    else:
        raise TypeError(f"config must be a Config, dict or None, not {type(config).__name__}")
    if seed is not None:
        cfg = cfg.with_updates(seed=int(seed))
    cfg.validate()
    return cfg


class RIMAE(TransformerMixin, BaseEstimator):
    """Self-supervised rotation-invariant encoder.

    ``fit`` runs masked pretraining; ``transform`` returns pooled
    (mean, max) patch latents of the student encoder, shape (n, 2 * dim).
    """

    def __init__(self, config=None, seed=None):
        self.config = config
        self.seed = seed

    def fit(self, X, y=None):
        cfg = _resolve_config(self.config, self.seed)
        clouds = check_point_clouds(X, min_points=cfg.model.k)
        result = pretrain(clouds, cfg)
        self._set_fitted(result)
        return self

    def _set_fitted(self, result):
        self.result_ = result
        self.config_ = result.config
        self.params_ = result.state.student
        self.loss_curve_ = np.array([row["loss"] for row in result.curve])
        self.n_features_out_ = 2 * result.config.model.dim
        return self

    def encode(self, X):
        """Per-patch latents (n, G, D) and the per-cloud ambiguous-frame flag."""
        check_is_fitted(self, "params_")
        clouds = check_point_clouds(X, min_points=self.config_.model.k)
        return encode_clouds(clouds, self.params_, self.config_)

    def transform(self, X):
        latents, _ = self.encode(X)
        return pool_latents(latents)

    def save(self, path):
        check_is_fitted(self, "result_")
        save_pretrain_checkpoint(path, self.result_)

    @classmethod
    def load(cls, path):
        result = load_pretrain_checkpoint(path)
        est = cls(config=result.config, seed=result.config.seed)
        return est._set_fitted(result)


class RIMAEClassifier(ClassifierMixin, BaseEstimator):
    """Classification head on a frozen encoder (linear probe when ``hidden=0``).

    If ``encoder`` is None or unfitted it is pretrained on the training
    clouds first.
    """

    def __init__(self, encoder=None, hidden=256, seed=None):
        self.encoder = encoder
        self.hidden = hidden
        self.seed = seed

    def fit(self, X, y):
        enc = self.encoder if self.encoder is not None else RIMAE(seed=self.seed)
        try:
            check_is_fitted(enc, "params_")
        except Exception:
            enc = enc.fit(X)
        self.encoder_ = enc
        feats = enc.transform(X)
        y = check_labels(y, len(feats))
        self.classes_, codes = np.unique(y, return_inverse=True)
        seed = enc.config_.seed if self.seed is None else self.seed
        self.head_ = fit_head(feats, codes, len(self.classes_), enc.config_.probe, seed, self.hidden)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "head_")
        return self.head_.logits(self.encoder_.transform(X))

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
