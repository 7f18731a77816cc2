"""scikit-learn style wrapper around LatticeNet training and inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .network import LatticeNet, LayerSpec
from .training import AugmentConfig, Metrics, TrainConfig, fit
from .validation import check_clouds


class LatticeNetSegmenter(ClassifierMixin, BaseEstimator):
    """Per-point semantic segmentation of point clouds.

    ``X`` is a list of clouds, each a :class:`~latticenet.lattice.PointCloud` or
    an ``(m, dim + f)`` array of positions followed by features.  ``y`` is a
    list of matching per-point label arrays; points labelled ``ignore_index``
    do not contribute to the loss.

    Parameters mirror :class:`~latticenet.network.LayerSpec` and
    :class:`~latticenet.training.TrainConfig`.
    """

    def __init__(
        self,
        sigma=0.1,
        dim=3,
        channels=(64, 128, 256),
        encoder_blocks=2,
        decoder_blocks=1,
        pointnet_hidden=(16, 32),
        pointnet_width=64,
        groups=32,
        slice_mode="deform",
        distribute_mode="distribute",
        deform_nonlinearity="tanh",
        regularizer_weight=0.0,
        epochs=50,
        lr=1e-3,
        weight_decay=1e-4,
        mirror=True,
        translation=0.0,
        color_jitter=0.0,
        stop_miou=None,
        ignore_index=-1,
        random_state=0,
    ):
        self.sigma = sigma
        self.dim = dim
        self.channels = channels
        self.encoder_blocks = encoder_blocks
        self.decoder_blocks = decoder_blocks
        self.pointnet_hidden = pointnet_hidden
        self.pointnet_width = pointnet_width
        self.groups = groups
        self.slice_mode = slice_mode
        self.distribute_mode = distribute_mode
        self.deform_nonlinearity = deform_nonlinearity
        self.regularizer_weight = regularizer_weight
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.mirror = mirror
        self.translation = translation
        self.color_jitter = color_jitter
        self.stop_miou = stop_miou
        self.ignore_index = ignore_index
        self.random_state = random_state

    def _encode(self, clouds):
        out = []
        for c in clouds:
            lab = c.labels
            keep = lab != self.ignore_index
            enc = np.full_like(lab, self.ignore_index)
            idx = np.searchsorted(self.classes_, lab[keep])
            if np.any(idx >= len(self.classes_)) or np.any(self.classes_[np.minimum(idx, len(self.classes_) - 1)] != lab[keep]):
                raise ValueError("labels contain classes unseen during fit")
            enc[keep] = idx
            out.append(c.replace(labels=enc))
        return out

    def fit(self, X, y=None, X_val=None, y_val=None):
        clouds = check_clouds(X, y, dim=self.dim, sigma=self.sigma)
        if any(c.labels is None for c in clouds):
            raise ValueError("fit needs labels: pass y or clouds that carry labels")
        n_features = clouds[0].num_features
        if any(c.num_features != n_features for c in clouds):
            raise ValueError("all clouds must have the same number of feature columns")
        all_labels = np.concatenate([c.labels for c in clouds])
        self.classes_ = np.unique(all_labels[all_labels != self.ignore_index])
        if len(self.classes_) < 1:
            raise ValueError("no labelled points to fit")
        self.n_features_in_ = self.dim + n_features
        spec = LayerSpec(
            num_classes=max(2, len(self.classes_)),
            dim=self.dim,
            in_features=n_features,
            channels=tuple(self.channels),
            encoder_blocks=self.encoder_blocks,
            decoder_blocks=self.decoder_blocks,
            pointnet_hidden=tuple(self.pointnet_hidden),
            pointnet_width=self.pointnet_width,
            groups=self.groups,
            slice_mode=self.slice_mode,
            distribute_mode=self.distribute_mode,
            deform_nonlinearity=self.deform_nonlinearity,
            regularizer_weight=self.regularizer_weight,
        )
        val = []
        if X_val is not None:
            val = self._encode(check_clouds(X_val, y_val, dim=self.dim, sigma=self.sigma, n_features=n_features))
        config = TrainConfig(
            epochs=self.epochs,
            lr=self.lr,
            weight_decay=self.weight_decay,
            seed=self.random_state,
            augment=AugmentConfig(mirror=self.mirror, translation=self.translation, color_jitter=self.color_jitter),
            stop_miou=self.stop_miou,
            ignore_index=self.ignore_index,
        )
        model = LatticeNet.create(spec, seed=self.random_state)
        result = fit(model, self._encode(clouds), val, config)
        if val:
            model.load_state_dict(result.best_state)
        self.model_ = model
        self.history_ = result.history
        return self

    def _clouds(self, X):
        check_is_fitted(self, "model_")
        return check_clouds(X, dim=self.dim, sigma=self.sigma, n_features=self.n_features_in_ - self.dim)

    def decision_function(self, X):
        """Per-point logits; a list for a list input, one array for a single cloud."""
        single = not isinstance(X, (list, tuple))
        out = [self.model_.forward(c).logits.data for c in self._clouds(X)]
        return out[0] if single else out

    def predict_proba(self, X):
        logits = self.decision_function(X)
        single = not isinstance(logits, list)
        probs = []
        for z in [logits] if single else logits:
            e = np.exp(z - z.max(axis=1, keepdims=True))
            probs.append(e[:, : len(self.classes_)] / e[:, : len(self.classes_)].sum(axis=1, keepdims=True))
        return probs[0] if single else probs

    def predict(self, X):
        logits = self.decision_function(X)
        if not isinstance(logits, list):
            return self.classes_[np.argmax(logits[:, : len(self.classes_)], axis=1)]
        return [self.classes_[np.argmax(z[:, : len(self.classes_)], axis=1)] for z in logits]

    def score(self, X, y=None, sample_weight=None):
        """Mean IoU over all points of all clouds."""
        clouds = check_clouds(X, y, dim=self.dim, sigma=self.sigma)
        metrics = Metrics.empty(len(self.classes_))
        for cloud, pred in zip(self._encode(clouds), self.predict([c for c in clouds])):
            metrics.update(np.searchsorted(self.classes_, pred), cloud.labels, self.ignore_index)
        return metrics.miou
