"""scikit-learn style wrappers around base-codec and RQuLPE training.

``X`` is a list of point clouds (:class:`PointCloud` or ``(N, 3)`` integer
arrays).  ``fit`` trains from scratch; ``partial_fit`` continues from the
fitted weights for one more epoch and fits from scratch on first use.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import basecodec as bc
from . import codec, core, enhancement


def _clouds(X) -> list[core.PointCloud]:
    return [x if isinstance(x, core.PointCloud) else core.PointCloud.from_points(np.asarray(x, dtype=np.int64))
            for x in X]


class BaseCodecEstimator(TransformerMixin, BaseEstimator):
    """Trains the five qp models; ``transform`` encodes clouds at ``(qp, sf)``."""

    def __init__(self, epochs_first=30, epochs_next=10, mode="sequential", lr=bc.BASE_LR, batch=4, region=32, seed=0,
                 qp=3, sf=1):
        self.epochs_first = epochs_first
        self.epochs_next = epochs_next
        self.mode = mode
        self.lr = lr
        self.batch = batch
        self.region = region
        self.seed = seed
        self.qp = qp
        self.sf = sf

    def _blocks(self, X):
        return [b.tensor.coords for pc in _clouds(X) for b in core.split_blocks(pc, self.region)]

    def fit(self, X, y=None):
        self.history_ = []
        self.models_ = bc.train_sequential(self._blocks(X), self.epochs_first, self.epochs_next, self.seed,
                                           self.mode, self.lr, self.batch, history=self.history_)
        self.n_epochs_ = {qp: 0 for qp in bc.QPS}
        return self

    def partial_fit(self, X, y=None):
        if not hasattr(self, "models_"):
            self.history_ = []
            self.models_ = bc.train_sequential(self._blocks(X), 1, 1, self.seed, self.mode, self.lr, self.batch,
                                               history=self.history_)
            self.n_epochs_ = {qp: 1 for qp in bc.QPS}
            return self
        blocks = [b for b in self._blocks(X) if len(b)]
        rng = np.random.default_rng(self.seed + sum(self.n_epochs_.values()))
        for qp in sorted(bc.QPS, key=lambda q: self.models_.lambdas[q]):
            bc._train_one(self.models_, qp, blocks, 1, self.lr, self.batch, rng, self.history_, "partial")
            self.n_epochs_[qp] += 1
        return self

    def _check(self):
        if not hasattr(self, "models_"):
            raise NotFittedError("BaseCodecEstimator is not fitted yet")

    def transform(self, X):
        """Single-layer bitstreams (bytes) at ``(qp, sf)`` for each cloud."""
        self._check()
        cfg = core.CodingConfig(self.qp, self.sf)
        return [codec.encode_scalable(pc, [cfg], self.models_, None, self.region).data for pc in _clouds(X)]

    def inverse_transform(self, streams):
        self._check()
        return [codec.decode_scalable(s, None, self.models_, None).upscaled() for s in streams]


class RQuLPEEstimator(BaseEstimator):
    """Trains the coordinate and feature predictors on latents of fitted base models."""

    def __init__(self, base_models=None, region=32, max_epochs=60, lr=1e-3, batch=4, seed=0):
        self.base_models = base_models
        self.region = region
        self.max_epochs = max_epochs
        self.lr = lr
        self.batch = batch
        self.seed = seed

    def _bank(self, X, X_val):
        if self.base_models is None:
            raise ValueError("RQuLPEEstimator needs fitted base_models")
        train, val = _clouds(X), _clouds(X_val if X_val is not None else X)
        bank = enhancement.build_latent_bank(self.base_models, train + val, self.region)
        tr = [k for k in bank.keys if k[0] < len(train)]
        va = [k for k in bank.keys if k[0] >= len(train)]
        return bank, tr, va

    def fit(self, X, y=None, X_val=None):
        bank, tr, va = self._bank(X, X_val)
        self.history_ = []
        self.models_ = enhancement.train_rqulpe(bank, tr, va, self.seed, self.max_epochs, self.lr, self.batch,
                                                self.history_)
        return self

    def partial_fit(self, X, y=None, X_val=None):
        bank, tr, va = self._bank(X, X_val)
        if not hasattr(self, "models_"):
            self.history_ = []
        rq = getattr(self, "models_", None)
        seed = self.seed + len(self.history_)
        self.models_ = enhancement.train_rqulpe(bank, tr, va, seed, 1, self.lr, self.batch, self.history_, rq)
        return self
