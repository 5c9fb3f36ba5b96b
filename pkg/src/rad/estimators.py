"""scikit-learn style wrappers around the original model and the RAD frameworks.

Inputs are integer-coded categorical matrices ``[n_samples, n_features]``.
Column cardinalities are taken from the data seen at fit time unless given
explicitly; codes beyond a column's cardinality at predict time fall back
to index 0, the same "unknown" slot the CSV encoder uses.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import type_of_target
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, Schema, TemporalSplit
from .models import OriginalModel, predict_proba
from .pipeline import (
    TrainConfig,
    _seed,
    build_models,
    distill_kd,
    finetune_distill,
    finetune_retrieval,
    fit_binary,
    pretrain_teacher,
)


def _check_codes(X, y=None):
    if y is None:
        X = check_array(X, dtype=np.int64)
    else:
        X, y = check_X_y(X, y, dtype=np.int64)
        if type_of_target(y) != "binary" or not np.isin(y, (0, 1)).all():
            raise ValueError("y must hold binary 0/1 labels")
    if (X < 0).any():
        raise ValueError("categorical codes must be non-negative")
    return X if y is None else (X, y.astype(np.int8))


def _clip_unknown(X: np.ndarray, cardinalities) -> np.ndarray:
    card = np.asarray(cardinalities)
    return np.where(X < card, X, 0)


def _as_dataset(X: np.ndarray, y: np.ndarray, cardinalities, offset: int = 0) -> Dataset:
    cols = tuple(f"x{j}" for j in range(X.shape[1]))
    vocab = tuple({str(v): v for v in range(c)} for c in cardinalities)
    return Dataset(Schema(cols, vocab), np.arange(offset, offset + len(X)), X, y, np.zeros(len(X), dtype=np.int64))


class _CTRBase(ClassifierMixin, BaseEstimator):
    def _cardinalities(self, *arrays) -> tuple[int, ...]:
        if self.cardinalities is not None:
            return tuple(int(c) for c in self.cardinalities)
        return tuple(int(c) for c in np.max(np.vstack(arrays), axis=0) + 1)

    def _config(self) -> TrainConfig:
        seed = 0 if self.random_state is None else int(self.random_state)
        return TrainConfig(
            pretrain_epochs=getattr(self, "pretrain_epochs", 5),
            finetune_epochs=self.epochs,
            kd_epochs=getattr(self, "kd_epochs", 10),
            batch_size=self.batch_size,
            lr=self.lr,
            seed=seed,
            k=getattr(self, "k", 10),
            dim=self.dim,
            hidden=self.hidden,
            freeze_relevance=getattr(self, "freeze_relevance", False),
        )

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _check_codes(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        p = predict_proba(self.model_, _clip_unknown(X, self.cardinalities_))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return self.classes_[(self.predict_proba(X)[:, 1] >= 0.5).astype(int)]

    def decision_function(self, X) -> np.ndarray:
        p = self.predict_proba(X)[:, 1]
        return np.log(p) - np.log1p(-p)


class OriginalClassifier(_CTRBase):
    """Embedding + MLP click model trained directly on its inputs."""

    def __init__(self, dim=16, hidden=64, epochs=5, batch_size=256, lr=1e-3, cardinalities=None,
                 random_state=None):
        self.dim = dim
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.cardinalities = cardinalities
        self.random_state = random_state

    def fit(self, X, y):
        X, y = _check_codes(X, y)
        cfg = self._config()
        self.cardinalities_ = self._cardinalities(X)
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.array([0, 1])
        self.model_ = OriginalModel(self.cardinalities_, cfg.dim, cfg.hidden, _seed(cfg, "original"))
        self.loss_curve_ = fit_binary(self.model_, _clip_unknown(X, self.cardinalities_), y, cfg.finetune_epochs,
                                      cfg, "original")
        return self


class RADClassifier(_CTRBase):
    """Retrieval or distill framework.

    ``fit(X, y, X_shift, y_shift)`` pretrains the relevance path on the
    older ``(X_shift, y_shift)`` rows, which also form the search space,
    then finetunes the framework on ``(X, y)``.  With ``mode="distill"``
    the relevance path is distilled into a student first and the fitted
    model never queries the index.
    """

    def __init__(self, mode="retrieval", k=10, dim=16, hidden=64, pretrain_epochs=5, epochs=5, kd_epochs=10,
                 batch_size=256, lr=1e-3, freeze_relevance=False, cardinalities=None, random_state=None):
        self.mode = mode
        self.k = k
        self.dim = dim
        self.hidden = hidden
        self.pretrain_epochs = pretrain_epochs
        self.epochs = epochs
        self.kd_epochs = kd_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.freeze_relevance = freeze_relevance
        self.cardinalities = cardinalities
        self.random_state = random_state

    def fit(self, X, y, X_shift=None, y_shift=None):
        if self.mode not in ("retrieval", "distill"):
            raise ValueError(f"mode must be 'retrieval' or 'distill', got {self.mode!r}")
        if X_shift is None or y_shift is None:
            raise ValueError("RADClassifier.fit needs the shifting rows X_shift, y_shift")
        X, y = _check_codes(X, y)
        Xs, ys = _check_codes(X_shift, y_shift)
        if Xs.shape[1] != X.shape[1]:
            raise ValueError(f"X_shift has {Xs.shape[1]} features, X has {X.shape[1]}")
        cfg = self._config()
        self.cardinalities_ = self._cardinalities(X, Xs)
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.array([0, 1])
        shifting = _as_dataset(_clip_unknown(Xs, self.cardinalities_), ys, self.cardinalities_)
        train = _as_dataset(_clip_unknown(X, self.cardinalities_), y, self.cardinalities_, offset=len(Xs))
        split = TemporalSplit(shifting, train, train.subset(np.zeros(len(train), dtype=bool)), (0, 0, 0))
        m = build_models(split, cfg)
        if self.mode == "retrieval":
            pretrain_teacher(m.teacher, split, cfg)
            self.loss_curve_ = finetune_retrieval(m.retrieval, split, cfg)
            self.model_ = m.retrieval
        else:
            pretrain_teacher(m.teacher_distill, split, cfg)
            self.kd_history_ = distill_kd(m.student, m.teacher_distill, shifting, cfg)
            self.loss_curve_ = finetune_distill(m.distill, train, cfg)
            self.model_ = m.distill
        return self

    @property
    def retrieval_calls_(self) -> int:
        check_is_fitted(self, "model_")
        return self.model_.retrieval_calls
