"""Input validation for the estimator API."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.utils import check_array

from .lattice import MAX_DIM, PointCloud


def check_sigma(sigma, dim: int) -> np.ndarray:
    """Broadcast a scalar or per-axis lattice scale to ``(dim,)`` and check positivity."""
    arr = np.asarray(sigma, dtype=np.float64)
    if arr.ndim > 1 or (arr.ndim == 1 and arr.shape[0] not in (1, dim)):
        raise ValueError(f"sigma must be a scalar or have {dim} entries, got shape {arr.shape}")
    arr = np.broadcast_to(arr.reshape(-1) if arr.ndim else arr, (dim,)).astype(np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError(f"sigma must be finite and positive, got {sigma!r}")
    return arr


def check_cloud(X, dim: int, sigma, labels=None, n_features: int | None = None) -> PointCloud:
    """Turn a :class:`PointCloud` or an ``(m, dim + f)`` array into a scaled cloud."""
    sig = check_sigma(sigma, dim)
    if isinstance(X, PointCloud):
        if X.dim != dim:
            raise ValueError(f"cloud has dimension {X.dim}, expected {dim}")
        cloud = X.replace(sigma=sig)
        if labels is not None:
            cloud = cloud.replace(labels=check_labels(labels, cloud.num_points))
    else:
        if not 1 <= dim <= MAX_DIM:
            raise ValueError(f"dim must be in [1, {MAX_DIM}]")
        arr = check_array(X, dtype=np.float64, ensure_min_features=dim)
        lab = check_labels(labels, arr.shape[0]) if labels is not None else None
        feats = arr[:, dim:] if arr.shape[1] > dim else None
        cloud = PointCloud(arr[:, :dim], features=feats, labels=lab, sigma=sig)
    if n_features is not None and cloud.num_features != n_features:
        raise ValueError(f"cloud has {cloud.num_features} feature columns, expected {n_features}")
    return cloud


def check_labels(labels, m: int) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.shape != (m,):
        raise ValueError(f"expected {m} labels, got shape {lab.shape}")
    if lab.dtype.kind == "f":
        if not np.all(np.isfinite(lab)) or not np.all(lab == np.round(lab)):
            raise ValueError("labels must be integers")
    elif lab.dtype.kind not in "iu":
        raise ValueError(f"labels must be integers, got dtype {lab.dtype}")
    return lab.astype(np.int64)


def check_clouds(X, y=None, *, dim: int, sigma, n_features: int | None = None) -> list[PointCloud]:
    """Validate a collection of clouds (and optional per-cloud label arrays)."""
    if isinstance(X, (PointCloud, np.ndarray)):
        X = [X]
        y = None if y is None else [y]
    if not isinstance(X, Sequence) or len(X) == 0:
        raise ValueError("expected a non-empty sequence of point clouds")
    if y is not None and len(y) != len(X):
        raise ValueError(f"got {len(X)} clouds but {len(y)} label arrays")
    return [
        check_cloud(c, dim, sigma, None if y is None else y[i], n_features)
        for i, c in enumerate(X)
    ]
