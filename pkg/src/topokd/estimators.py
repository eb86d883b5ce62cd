"""scikit-learn style wrappers around the segmentation network and the persistence code."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .harness import DivergenceError
from .net import NetworkConfig, forward, init_network
from .pointcloud import PointCloud
from .tda import persistence, snapshot_betti

__all__ = ["PointSegmenter", "BettiCurveTransformer", "PersistenceSummary"]


class PointSegmenter(BaseEstimator, ClassifierMixin):
    """Per-point classifier backed by the kNN segmentation network.

    ``X`` holds one row of xyz coordinates per point. Rows sharing a value in
    ``scene_ids`` form one cloud (neighbourhoods never cross scenes); without
    ``scene_ids`` all rows are one scene. Training is full-batch gradient
    descent on the mean per-scene cross-entropy.
    """

    def __init__(self, depths=(1, 1, 1, 1, 1), channels=(4, 4, 8, 16, 32), k=8, lr=0.1,
                 steps=200, random_state=0):
        self.depths = depths
        self.channels = channels
        self.k = k
        self.lr = lr
        self.steps = steps
        self.random_state = random_state

    def _scenes(self, X, y=None, scene_ids=None):
        if scene_ids is None:
            scene_ids = np.zeros(len(X), dtype=np.int64)
        scene_ids = np.asarray(scene_ids)
        if scene_ids.shape != (len(X),):
            raise ValueError("scene_ids must give one id per row")
        out = []
        for s in np.unique(scene_ids):
            rows = np.flatnonzero(scene_ids == s)
            labels = None if y is None else y[rows]
            out.append((rows, PointCloud(X[rows], labels=labels, n_classes=len(self.classes_))))
        return out

    def fit(self, X, y, scene_ids=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        if X.shape[1] != 3:
            raise ValueError(f"expected xyz columns, got {X.shape[1]}")
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        self.n_features_in_ = 3
        cfg = NetworkConfig(tuple(self.depths), tuple(self.channels), int(self.k),
                            len(self.classes_), int(self.random_state))
        net = init_network(cfg)
        traces = [net.build(c, c.labels) for _, c in self._scenes(X, y_enc, scene_ids)]
        names = list(net.params)
        self.loss_curve_ = []
        for step in range(int(self.steps) + 1):
            total = {n: np.zeros_like(net.params[n]) for n in names}
            loss = 0.0
            for tr in traces:
                net.run(tr, [tr.loss_node])
                loss += float(tr.graph[tr.loss_node])
                for n, g in zip(names, tr.graph.backward([tr.graph.params[n] for n in names],
                                                         tr.loss_node)):
                    total[n] += g
            loss /= len(traces)
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became non-finite at step {step}")
            self.loss_curve_.append(loss)
            if step == self.steps:
                break
            for n in names:
                net.params[n] = net.params[n] - self.lr * total[n] / len(traces)
        self.network_ = net
        return self

    def predict_proba(self, X, scene_ids=None):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 3:
            raise ValueError(f"expected xyz columns, got {X.shape[1]}")
        out = np.zeros((len(X), len(self.classes_)))
        for rows, cloud in self._scenes(X, None, scene_ids):
            z = forward(self.network_, cloud).logits
            z = z - z.max(axis=1, keepdims=True)
            p = np.exp(z)
            out[rows] = p / p.sum(axis=1, keepdims=True)
        return out

    def predict(self, X, scene_ids=None):
        return self.classes_[self.predict_proba(X, scene_ids).argmax(axis=1)]


class BettiCurveTransformer(BaseEstimator, TransformerMixin):
    """Map each point cloud to its Betti numbers at fixed Rips scales.

    ``X`` is a sequence of ``m x d`` arrays; the output has one row per cloud
    and ``len(scales) * (maxdim + 1)`` columns, scale-major.
    """

    def __init__(self, scales=(0.1, 0.2, 0.4, 0.8), maxdim=1):
        self.scales = scales
        self.maxdim = maxdim

    def fit(self, X, y=None):
        scales = np.asarray(self.scales, dtype=np.float64)
        if scales.ndim != 1 or scales.size == 0 or np.any(np.diff(scales) <= 0):
            raise ValueError("scales must be a non-empty strictly increasing sequence")
        self.n_features_out_ = scales.size * (self.maxdim + 1)
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_out_")
        rows = [snapshot_betti(check_array(x, dtype=np.float64), self.scales, self.maxdim)
                .betti.reshape(-1) for x in X]
        return np.array(rows, dtype=np.int64).reshape(len(rows), self.n_features_out_)


class PersistenceSummary(BaseEstimator, TransformerMixin):
    """Total and maximum finite persistence per homology dimension of each cloud."""

    def __init__(self, maxdim=1):
        self.maxdim = maxdim

    def fit(self, X, y=None):
        self.n_features_out_ = 2 * (self.maxdim + 1)
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_out_")
        out = np.zeros((len(X), self.n_features_out_))
        for i, x in enumerate(X):
            dgm = persistence(check_array(x, dtype=np.float64), self.maxdim)
            for d in range(self.maxdim + 1):
                p = dgm.points(d)
                life = p[:, 1] - p[:, 0] if len(p) else np.zeros(0)
                out[i, 2 * d] = life.sum()
                out[i, 2 * d + 1] = life.max(initial=0.0)
        return out
