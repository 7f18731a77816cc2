"""Differentiable operators between point clouds and lattice vertex values.

All reductions over the inverse map J_v run in ascending point order, and
every backward rule is written as a gather so results are reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, matmul, add, relu, record, segment_max
from .lattice import (
    PointCloud,
    SimplexAssignment,
    SparseLattice,
    coarsen_table,
    num_taps,
    opposite_taps,
    upsample_table,
)

DISTRIBUTE_MODES = ("distribute", "no-local-avg")
NONLINEARITIES = ("tanh", "relu")


def _scatter_pairs(pairs: np.ndarray, assignment: SimplexAssignment) -> np.ndarray:
    """Sum ``(m, d+1, C)`` per-pair rows into ``(n, C)`` vertex rows in J_v order."""
    m, dp1, C = pairs.shape
    flat = pairs.reshape(m * dp1, C)[assignment.order]
    return np.add.reduceat(flat, assignment.offsets[:-1], axis=0)


def _weighted_sum(X: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = w[:, 0, None] * X[idx[:, 0]]
    for k in range(1, idx.shape[1]):
        out = out + w[:, k, None] * X[idx[:, k]]
    return out


def _check_assignment(X: Tensor, assignment: SimplexAssignment, op: str) -> None:
    if X.ndim != 2 or X.shape[0] != assignment.num_vertices:
        raise ShapeError(op, X.shape, (assignment.num_vertices, "C"))


def splat(features: Tensor, assignment: SimplexAssignment) -> Tensor:
    """Barycentric scatter ``x_v = sum_{p in J_v} b_pv f_p``."""
    F = as_tensor(features)
    if F.ndim != 2 or F.shape[0] != assignment.num_points:
        raise ShapeError("splat", F.shape, (assignment.num_points, "f"))
    if F.shape[1] == 0:
        raise ValueError("splat: point features are empty (f_d = 0), nothing to splat")
    b = assignment.weights.astype(F.dtype)
    idx = assignment.vertex_indices
    out = _scatter_pairs(b[:, :, None] * F.data[:, None, :], assignment)

    def backward(g):
        return (_weighted_sum(g, idx, b),)

    return record("splat", (F,), out, backward)


def slice_values(values: Tensor, assignment: SimplexAssignment) -> Tensor:
    """Barycentric interpolation ``f_p = sum_{v in I_p} b_pv x_v``."""
    X = as_tensor(values)
    _check_assignment(X, assignment, "slice")
    b = assignment.weights.astype(X.dtype)
    idx = assignment.vertex_indices

    def backward(g):
        return (_scatter_pairs(b[:, :, None] * g[:, None, :], assignment),)

    return record("slice", (X,), _weighted_sum(X.data, idx, b), backward)


def gather(values: Tensor, assignment: SimplexAssignment) -> Tensor:
    """Concatenate the weighted values ``b_pv x_v`` of each simplex, vertex ``k`` in block ``k``."""
    X = as_tensor(values)
    _check_assignment(X, assignment, "gather")
    b = assignment.weights.astype(X.dtype)
    idx = assignment.vertex_indices
    m, dp1 = idx.shape
    C = X.shape[1]
    out = (b[:, :, None] * X.data[idx]).reshape(m, dp1 * C)

    def backward(g):
        return (_scatter_pairs(b[:, :, None] * g.reshape(m, dp1, C), assignment),)

    return record("gather", (X,), out, backward)


def deform_offsets(
    q: Tensor,
    weight: Tensor,
    bias: Tensor,
    nonlinearity: str = "tanh",
    include_self: bool = False,
) -> Tensor:
    """Permutation-equivariant barycentric offsets from gathered simplex values.

    ``q`` is ``(m, (d+1) * C)``; ``weight`` is ``(C, 1)`` and ``bias`` ``(1,)``.
    For vertex ``v`` of a simplex the offset is
    ``nl(bias + (q_v - max_{u != v} q_u) @ weight)`` with the max taken per
    channel over the other vertices (or over all vertices with ``include_self``).
    """
    q, weight, bias = as_tensor(q), as_tensor(weight), as_tensor(bias)
    C = weight.shape[0]
    if weight.shape != (C, 1) or bias.shape != (1,) or q.ndim != 2 or q.shape[1] % C:
        raise ShapeError("deform_offsets", q.shape, weight.shape, bias.shape)
    if nonlinearity not in NONLINEARITIES:
        raise ValueError(f"unknown nonlinearity {nonlinearity!r}; choose from {NONLINEARITIES}")
    m = q.shape[0]
    dp1 = q.shape[1] // C
    Q = q.data.reshape(m, dp1, C)
    if dp1 < 2 and not include_self:
        raise ValueError("deform_offsets needs at least two simplex vertices")

    others = np.empty((m, dp1, C), dtype=Q.dtype)
    arg = np.empty((m, dp1, C), dtype=np.int64)
    for k in range(dp1):
        pool = list(range(dp1)) if include_self else [j for j in range(dp1) if j != k]
        cand = Q[:, pool, :]
        a = np.argmax(cand, axis=1)  # lowest slot on ties
        arg[:, k, :] = np.asarray(pool)[a]
        others[:, k, :] = np.take_along_axis(cand, a[:, None, :], axis=1)[:, 0, :]
    diff = Q - others
    z = diff @ weight.data[:, 0] + bias.data[0]
    if nonlinearity == "tanh":
        out = np.tanh(z)
        dnl = 1 - out * out
    else:
        out = np.maximum(z, 0)
        dnl = (z > 0).astype(z.dtype)
    W = weight.data[:, 0]

    def backward(g):
        dz = g * dnl  # (m, dp1)
        gW = np.einsum("mk,mkc->c", dz, diff)[:, None]
        gb = np.asarray([dz.sum()], dtype=dz.dtype)
        gQ = dz[:, :, None] * W[None, None, :]
        neg = -gQ
        rows = np.arange(m)[:, None]
        cols = np.arange(C)[None, :]
        for k in range(dp1):
            np.add.at(gQ, (rows, arg[:, k, :], cols), neg[:, k, :])
        return gQ.reshape(m, dp1 * C), gW, gb

    return record("deform_offsets", (q, weight, bias), out.astype(q.dtype), backward)


def slice_with_offsets(values: Tensor, assignment: SimplexAssignment, offsets: Tensor) -> Tensor:
    """``f_p = sum_v (b_pv + db_pv) x_v``; with zero offsets this is :func:`slice_values`."""
    X, D = as_tensor(values), as_tensor(offsets)
    _check_assignment(X, assignment, "deform_slice")
    if D.shape != assignment.weights.shape:
        raise ShapeError("deform_slice", D.shape, assignment.weights.shape)
    idx = assignment.vertex_indices
    w = assignment.weights.astype(X.dtype) + D.data

    def backward(g):
        gX = _scatter_pairs(w[:, :, None] * g[:, None, :], assignment)
        gD = np.einsum("mc,mkc->mk", g, X.data[idx])
        return gX, gD

    return record("deform_slice", (X, D), _weighted_sum(X.data, idx, w), backward)


def deform_slice(
    values: Tensor,
    assignment: SimplexAssignment,
    weight: Tensor,
    bias: Tensor,
    nonlinearity: str = "tanh",
    include_self: bool = False,
) -> tuple[Tensor, Tensor]:
    """Slice with learned offsets; returns ``(point features, offsets)``."""
    q = gather(values, assignment)
    delta = deform_offsets(q, weight, bias, nonlinearity=nonlinearity, include_self=include_self)
    return slice_with_offsets(values, assignment, delta), delta


def deform_regularizer(offsets: Tensor) -> Tensor:
    """Mean over points of the squared sum of each point's offsets."""
    D = as_tensor(offsets)
    if D.ndim != 2:
        raise ShapeError("deform_regularizer", D.shape)
    s = D.data.sum(axis=1)
    m = D.shape[0]

    def backward(g):
        return (np.broadcast_to((2.0 * g / m) * s[:, None], D.shape).astype(D.dtype),)

    return record("deform_regularizer", (D,), np.asarray((s * s).mean(), dtype=D.dtype), backward)


# --------------------------------------------------------------------------- distribute


@dataclass(frozen=True, eq=False)
class DistributeBuffers:
    """The points contributing to each vertex, stacked in J_v order.

    Rows ``offsets[v]:offsets[v+1]`` of ``coords`` and ``features`` belong to
    vertex ``v``; ``mean[v]`` is the local mean that was subtracted.
    """

    points: np.ndarray
    offsets: np.ndarray
    coords: np.ndarray
    features: np.ndarray
    mean: np.ndarray

    @property
    def num_vertices(self) -> int:
        return len(self.offsets) - 1

    def coords_of(self, v: int) -> np.ndarray:
        return self.coords[self.offsets[v] : self.offsets[v + 1]]

    def features_of(self, v: int) -> np.ndarray:
        return self.features[self.offsets[v] : self.offsets[v + 1]]


def distribute(cloud: PointCloud, assignment: SimplexAssignment, local_average: bool = True) -> DistributeBuffers:
    """Collect, per vertex, the centred scaled coordinates and raw features of J_v."""
    pts = assignment.pair_points
    offsets = assignment.offsets
    g = cloud.scaled_positions[pts]
    counts = np.diff(offsets)
    mu = np.add.reduceat(g, offsets[:-1], axis=0) / counts[:, None]
    coords = g - np.repeat(mu, counts, axis=0) if local_average else g
    return DistributeBuffers(pts, offsets, coords, cloud.features[pts], mu)


def distributed_rows(buffers: DistributeBuffers, features: Tensor | None = None, dtype=np.float64) -> Tensor:
    """``[coords ; features]`` rows as a tensor, differentiable w.r.t. ``features``."""
    coords = buffers.coords.astype(dtype)
    if features is None:
        return Tensor(np.concatenate([coords, buffers.features.astype(dtype)], axis=1))
    F = as_tensor(features)
    pts = buffers.points
    if F.ndim != 2 or F.shape[1] != buffers.features.shape[1]:
        raise ShapeError("distribute", F.shape, buffers.features.shape)
    d = coords.shape[1]
    n_pts = F.shape[0]

    def backward(g):
        gf = g[:, d:]
        out = np.zeros((n_pts, gf.shape[1]), dtype=gf.dtype)
        np.add.at(out, pts, gf)
        return (out,)

    return record("distribute", (F,), np.concatenate([coords, F.data[pts]], axis=1), backward)


def vertex_pointnet(rows: Tensor, offsets: np.ndarray, layers) -> Tensor:
    """Shared per-row MLP followed by a max-pool over each vertex's rows.

    ``layers`` is a sequence of ``(weight, bias)`` pairs; ReLU separates layers
    but is not applied after the last one.  An empty sequence pools raw rows.
    """
    h = rows
    for i, (w, b) in enumerate(layers):
        h = add(matmul(h, w), b)
        if i < len(layers) - 1:
            h = relu(h)
    return segment_max(h, offsets)


# --------------------------------------------------------------------------- convolutions


def _tap_conv(op: str, X: Tensor, gather_idx: np.ndarray, scatter_idx: np.ndarray, W: Tensor, bias: Tensor | None) -> Tensor:
    """Sparse convolution: row ``r`` reads ``X[gather_idx[r, k]]`` through tap ``k``.

    ``scatter_idx[u, k]`` lists the output row that reads input ``u`` through
    tap ``k`` so the backward pass is a gather as well.  ``-1`` means absent.
    """
    X, W = as_tensor(X), as_tensor(W)
    K = gather_idx.shape[1]
    if W.ndim != 3 or W.shape[0] != K or X.ndim != 2 or W.shape[1] != X.shape[1]:
        raise ShapeError(op, X.shape, W.shape)
    cin, cout = W.shape[1], W.shape[2]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(op, bias.shape, (cout,))
    Xd = X.data
    pad = np.concatenate([Xd, np.zeros((1, cin), dtype=Xd.dtype)])
    G = pad[gather_idx].reshape(gather_idx.shape[0], K * cin)
    Wm = W.data.reshape(K * cin, cout)
    out = G @ Wm
    if bias is not None:
        out = out + bias.data
    taps = np.arange(K)

    def backward(g):
        gW = (G.T @ g).reshape(W.shape)
        gG = (g @ Wm.T).reshape(g.shape[0], K, cin)
        gpad = np.concatenate([gG, np.zeros((1, K, cin), dtype=gG.dtype)])
        picked = gpad[scatter_idx, taps[None, :]]  # (n_in, K, cin)
        gX = picked[:, 0]
        for k in range(1, K):
            gX = gX + picked[:, k]
        grads = [gX, gW]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (X, W) if bias is None else (X, W, bias)
    return record(op, inputs, out, backward)


def _check_filter(W: Tensor, d: int, op: str) -> None:
    if W.shape[0] != num_taps(d):
        raise ShapeError(op, W.shape, (num_taps(d), "in", "out"))


def convolve(values: Tensor, lattice: SparseLattice, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1-ring lattice convolution; unallocated neighbours contribute zero.

    ``weight`` has shape ``(2(d+1)+1, in, out)`` with taps ordered center,
    ``+axis 0..d``, ``-axis 0..d``.
    """
    W = as_tensor(weight)
    _check_filter(W, lattice.d, "convolve")
    X = as_tensor(values)
    if X.ndim != 2 or X.shape[0] != len(lattice):
        raise ShapeError("convolve", X.shape, (len(lattice), "C"))
    table = lattice.neighbor_table
    return _tap_conv("convolve", X, table, table[:, opposite_taps(lattice.d)], W, bias)


class LevelPair:
    """Cached gather tables between a fine lattice and the next coarser one."""

    def __init__(self, fine: SparseLattice, coarse: SparseLattice):
        self.fine = fine
        self.coarse = coarse
        self.down = coarsen_table(fine, coarse)
        self.up = upsample_table(coarse, fine)


def coarsen_conv(values: Tensor, pair: LevelPair, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Strided convolution: each coarse vertex convolves over its embedded fine 1-ring."""
    W = as_tensor(weight)
    _check_filter(W, pair.fine.d, "coarsen_conv")
    X = as_tensor(values)
    if X.ndim != 2 or X.shape[0] != len(pair.fine):
        raise ShapeError("coarsen_conv", X.shape, (len(pair.fine), "C"))
    return _tap_conv("coarsen_conv", X, pair.down, pair.up, W, bias)


def upsample_conv(values: Tensor, pair: LevelPair, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution: each fine vertex reads the integral coarse candidates around ``c/2``."""
    W = as_tensor(weight)
    _check_filter(W, pair.fine.d, "upsample_conv")
    X = as_tensor(values)
    if X.ndim != 2 or X.shape[0] != len(pair.coarse):
        raise ShapeError("upsample_conv", X.shape, (len(pair.coarse), "C"))
    return _tap_conv("upsample_conv", X, pair.up, pair.down, W, bias)
