"""scikit-learn style wrapper around the curriculum and the item index."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Dataset
from .errors import ConfigError, StructuralError
from .fusion import encode_items
from .objectives import LossConfig
from .retrieval import build_index, evaluate, retrieve_topk
from .trainer import Stage, TrainConfig, new_params, run_stage2_both, run_stage3


class MultimodalFusionRetriever(BaseEstimator, TransformerMixin):
    """Train adapters and a fusion head on a labeled :class:`Dataset`.

    ``fit`` runs text and image alignment (unless ``curriculum=False``) and
    then fusion alignment. ``transform`` maps items to fused embeddings,
    ``predict`` returns the top-``k`` item ids of the fitted catalog for each
    query row, and ``score`` is desirability nDCG@``k`` on a dataset.
    """

    def __init__(self, variant="MoE+Bilinear", epochs=20, stage2_epochs=None, batch_size=64,
                 learning_rate=1e-3, negatives="topk", curriculum=True, finetune_adapters=True,
                 heads=4, seed=7, k=10, loss=None):
        self.variant = variant
        self.epochs = epochs
        self.stage2_epochs = stage2_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.negatives = negatives
        self.curriculum = curriculum
        self.finetune_adapters = finetune_adapters
        self.heads = heads
        self.seed = seed
        self.k = k
        self.loss = loss

    def _config(self) -> TrainConfig:
        return TrainConfig(
            stage=Stage.FUSION, variant=self.variant, epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, negatives=self.negatives, seed=self.seed,
            finetune_adapters=self.finetune_adapters, heads=self.heads,
            loss=self.loss if self.loss is not None else LossConfig(),
        )

    def fit(self, X, y=None):
        if not isinstance(X, Dataset):
            raise ConfigError("fit expects a Dataset (labels live on its pairs)")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        cfg = self._config()
        params = new_params(X.dim, cfg)
        if self.curriculum:
            s2 = cfg.replace(epochs=self.stage2_epochs or self.epochs)
            params = run_stage2_both(X, params, s2)
        res = run_stage3(X, params, cfg)
        self.params_ = res.params
        self.history_ = res.history
        self.index_ = build_index(X.items, self.params_)
        self.n_features_in_ = 2 * X.dim
        return self

    def transform(self, X):
        """Fused embeddings for items: a Dataset, or rows of ``[text, image]``."""
        check_is_fitted(self, "params_")
        d = self.params_.dim
        if isinstance(X, Dataset):
            text, image = X.text_matrix(), X.image_matrix()
        else:
            X = check_array(X, dtype=np.float64)
            if X.shape[1] != 2 * d:
                raise StructuralError(f"expected {2 * d} columns ([text, image]), got {X.shape[1]}")
            text, image = X[:, :d], X[:, d:]
        return encode_items(text, image, self.params_).h_x

    def predict(self, X):
        """Top-``k`` catalog item ids for each query embedding row."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.params_.dim:
            raise StructuralError(f"expected {self.params_.dim} columns, got {X.shape[1]}")
        k = min(self.k, len(self.index_.item_ids))
        return [retrieve_topk(self.index_, q, self.params_, k).item_ids for q in X]

    def score(self, X, y=None):
        check_is_fitted(self, "params_")
        if not isinstance(X, Dataset):
            raise ConfigError("score expects a Dataset")
        return evaluate(X, self.params_, (self.k,)).get("desirability", self.k)
