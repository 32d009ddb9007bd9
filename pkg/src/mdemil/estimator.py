"""scikit-learn compatible front end.

``X`` is a sequence of bags, each an ``N_i x d`` array of instance embeddings;
``y`` holds one label per bag.

>>> clf = MDEMILClassifier(epochs=5, warmup_epochs=1, embed_dim=32, attn_dim=16, ffn_dim=32, text_dim=32)
>>> clf.fit(bags, labels).predict(test_bags)  # doctest: +SKIP
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .model import predict as bundle_predict
from .trainer import FitResult, TrainConfig, fit_bags
from .validation import bags_from_arrays, check_bag, check_bags, check_bags_labels


class MDEMILClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Dual-branch ensemble MIL classifier with text distillation.

    ``transform`` returns the slide embeddings of the shared aggregator, so the
    estimator can sit in front of any downstream sklearn model.
    """

    def __init__(
        self,
        alpha: float = 0.1,
        lam: float = 0.25,
        ensemble: str = "shared",
        distillation: bool = True,
        aggregator: str = "gated",
        fusion: str = "mean-softmax",
        embed_dim: int = 256,
        attn_dim: int = 128,
        ffn_dim: int = 256,
        text_dim: int = 512,
        template_len: int = 4,
        class_token_len: int = 2,
        logit_scale: float = 10.0,
        base_lr: float = 2e-4,
        weight_decay: float = 1e-5,
        epochs: int = 50,
        warmup_epochs: int = 2,
        accumulate: int = 1,
        text_seed: int = 0,
        text_dir: Optional[str] = None,
        class_names: Optional[Sequence[str]] = None,
        random_state: int = 0,
    ):
        self.alpha = alpha
        self.lam = lam
        self.ensemble = ensemble
        self.distillation = distillation
        self.aggregator = aggregator
        self.fusion = fusion
        self.embed_dim = embed_dim
        self.attn_dim = attn_dim
        self.ffn_dim = ffn_dim
        self.text_dim = text_dim
        self.template_len = template_len
        self.class_token_len = class_token_len
        self.logit_scale = logit_scale
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.accumulate = accumulate
        self.text_seed = text_seed
        self.text_dir = text_dir
        self.class_names = class_names
        self.random_state = random_state

    def to_config(self) -> TrainConfig:
        params = self.get_params()
        seed = int(params.pop("random_state"))
        params.pop("class_names")
        return TrainConfig(seeds=(seed,), **params).validate()

    def fit(self, X, y):
        bags, y = check_bags_labels(X, y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.class_names is not None:
            names = list(self.class_names)
            if len(names) != len(self.classes_):
                raise ValueError(f"{len(names)} class names for {len(self.classes_)} classes")
        else:
            names = [str(c) for c in self.classes_]
        config = self.to_config()
        self.n_features_in_ = bags[0].shape[1]
        self.result_: FitResult = fit_bags(bags_from_arrays(bags, y_idx), names, config, config.seeds[0])
        self.bundle_ = self.result_.bundle
        self.prompt_bank_ = self.result_.bank
        self.train_log_ = self.result_.log
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "bundle_")
        bags = check_bags(X, self.n_features_in_)
        return np.vstack([bundle_predict(self.bundle_, b, self.fusion)[0] for b in bags])

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "bundle_")
        bags = check_bags(X, self.n_features_in_)
        idx = [bundle_predict(self.bundle_, b, self.fusion)[1] for b in bags]
        return self.classes_[np.asarray(idx, dtype=int)]

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "bundle_")
        bags = check_bags(X, self.n_features_in_)
        return np.vstack([self.bundle_.aggregator(b)[0].data for b in bags])

    def attention(self, x) -> np.ndarray:
        """Attention weights of the shared aggregator over one bag's instances."""
        check_is_fitted(self, "bundle_")
        return self.bundle_.aggregator(check_bag(x, self.n_features_in_))[1].data[0].copy()
