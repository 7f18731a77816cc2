"""Sparse permutohedral lattice: elevation, simplex lookup, hashing and level embedding.

Vertex coordinates follow the classic construction: every coordinate vector
lies in the zero-sum hyperplane and all its components are congruent modulo
``d + 1``.  Immediate neighbours differ by ``±[-1, ..., d, ..., -1]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

MAX_DIM = 6
DEFAULT_CAPACITY = 5_000_000


class LatticeCapacityError(RuntimeError):
    """Raised when a lattice would need more vertices than it may allocate."""

    def __init__(self, requested: int, capacity: int):
        self.requested = requested
        self.capacity = capacity
        super().__init__(
            f"lattice needs {requested} vertices but capacity is {capacity}"
        )


def _check_dim(d: int) -> int:
    d = int(d)
    if not 1 <= d <= MAX_DIM:
        raise ValueError(f"lattice dimension must be in [1, {MAX_DIM}], got {d}")
    return d


def elevation_matrix(d: int) -> np.ndarray:
    """Return the ``(d+1, d)`` matrix mapping R^d onto the zero-sum hyperplane.

    Column ``j`` is ``s_j * [1, ..., 1, -(j+1), 0, ..., 0]`` with ``j+1`` leading
    ones and ``s_j = (d+1) sqrt(2/3) / sqrt((j+1)(j+2))``.  The columns are
    orthogonal with squared norm ``2/3 (d+1)^2`` so the map is a scaled isometry.
    """
    d = _check_dim(d)
    E = np.zeros((d + 1, d))
    for j in range(d):
        scale = (d + 1) * np.sqrt(2.0 / 3.0) / np.sqrt((j + 1) * (j + 2))
        E[: j + 1, j] = scale
        E[j + 1, j] = -(j + 1) * scale
    return E


def elevate(positions) -> np.ndarray:
    """Embed scaled positions (``(d,)`` or ``(m, d)``) into the hyperplane."""
    pos = np.asarray(positions, dtype=np.float64)
    single = pos.ndim == 1
    pos = np.atleast_2d(pos)
    out = pos @ elevation_matrix(pos.shape[1]).T
    return out[0] if single else out


def find_enclosing_simplex(elevated) -> tuple[np.ndarray, np.ndarray]:
    """Locate the simplex containing each elevated point.

    Returns ``(keys, weights)`` with ``keys`` of shape ``(m, d+1, d+1)`` holding
    the integer coordinates of the ``d+1`` vertices (vertex ``k`` is the one with
    remainder ``k``) and ``weights`` of shape ``(m, d+1)``.  A single point of
    shape ``(d+1,)`` returns ``(d+1, d+1)`` keys and ``(d+1,)`` weights.
    """
    y = np.asarray(elevated, dtype=np.float64)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    m, dp1 = y.shape
    d = dp1 - 1
    _check_dim(d)
    rows = np.arange(m)

    # nearest remainder-0 point, ties rounded down
    v = y / dp1
    up = np.ceil(v) * dp1
    down = np.floor(v) * dp1
    rem0 = np.where(up - y < y - down, up, down)
    coord_sum = np.rint(rem0.sum(axis=1) / dp1).astype(np.int64)

    diff = y - rem0
    order = np.argsort(-diff, axis=1, kind="stable")
    rank = np.empty((m, dp1), dtype=np.int64)
    rank[rows[:, None], order] = np.arange(dp1)

    rank += coord_sum[:, None]
    low = rank < 0
    high = rank > d
    rank[low] += dp1
    rem0[low] += dp1
    rank[high] -= dp1
    rem0[high] -= dp1

    bary = np.zeros((m, d + 2))
    delta = (y - rem0) / dp1
    for i in range(dp1):
        bary[rows, d - rank[:, i]] += delta[:, i]
        bary[rows, d + 1 - rank[:, i]] -= delta[:, i]
    bary[:, 0] += 1.0 + bary[:, d + 1]
    weights = bary[:, :dp1]

    base = rem0.astype(np.int64)
    keys = np.empty((m, dp1, dp1), dtype=np.int64)
    for k in range(dp1):
        keys[:, k, :] = base + np.where(rank <= d - k, k, k - dp1)
    if single:
        return keys[0], weights[0]
    return keys, weights


def neighbor_offsets(d: int) -> np.ndarray:
    """The ``2(d+1)`` neighbour offsets: ``+axis 0..d`` followed by ``-axis 0..d``."""
    d = _check_dim(d)
    plus = np.full((d + 1, d + 1), -1, dtype=np.int64)
    np.fill_diagonal(plus, d)
    return np.concatenate([plus, -plus])


def tap_offsets(d: int) -> np.ndarray:
    """Convolution taps: center first, then the neighbour offsets."""
    return np.concatenate([np.zeros((1, d + 1), dtype=np.int64), neighbor_offsets(d)])


def num_taps(d: int) -> int:
    return 2 * (d + 1) + 1


def opposite_taps(d: int) -> np.ndarray:
    """Index map sending each tap to the tap with the negated offset."""
    dp1 = d + 1
    idx = np.arange(num_taps(d))
    out = idx.copy()
    out[1 : 1 + dp1] = idx[1 + dp1 :]
    out[1 + dp1 :] = idx[1 : 1 + dp1]
    return out


def neighbor_coord(coord, axis: int, sign: int) -> np.ndarray:
    c = np.asarray(coord, dtype=np.int64)
    d = c.shape[0] - 1
    if not 0 <= axis <= d:
        raise ValueError(f"axis must be in [0, {d}], got {axis}")
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign}")
    offset = np.full(d + 1, -1, dtype=np.int64)
    offset[axis] = d
    return c + sign * offset


def is_lattice_coord(coords) -> np.ndarray:
    """Row-wise check of the zero-sum and common-residue invariants."""
    c = np.atleast_2d(np.asarray(coords))
    if not np.issubdtype(c.dtype, np.integer):
        if not np.all(np.mod(c, 1) == 0):
            return np.zeros(c.shape[0], dtype=bool)
        c = c.astype(np.int64)
    dp1 = c.shape[1]
    res = np.mod(c, dp1)
    return (c.sum(axis=1) == 0) & np.all(res == res[:, :1], axis=1)


class CoordTable:
    """Exact coordinate -> row lookup.

    The first ``d`` components (the last one is implied by the zero sum) are
    packed into a single int64 with a mixed-radix code that is injective over
    the bounding box of the stored coordinates, so lookups are a sorted search
    with no collisions.  Falls back to a dict when the box is too large to pack.
    """

    def __init__(self, coords: np.ndarray):
        coords = np.asarray(coords, dtype=np.int64)
        self.n, dp1 = coords.shape
        self.d = dp1 - 1
        head = coords[:, : self.d]
        if self.n:
            self._lo = head.min(axis=0)
            span = head.max(axis=0) - self._lo + 1
        else:
            self._lo = np.zeros(self.d, dtype=np.int64)
            span = np.ones(self.d, dtype=np.int64)
        self._span = span
        self._packed = float(np.prod(span.astype(np.float64))) < 2.0**62
        if self._packed:
            self._radix = np.concatenate([[1], np.cumprod(span[:-1])]).astype(np.int64)
            keys = self._pack(head)
            self._order = np.argsort(keys, kind="stable")
            self._sorted = keys[self._order]
            if self.n > 1 and np.any(self._sorted[1:] == self._sorted[:-1]):
                raise ValueError("duplicate coordinates in lattice")
        else:
            self._dict = {tuple(row): i for i, row in enumerate(coords.tolist())}
            if len(self._dict) != self.n:
                raise ValueError("duplicate coordinates in lattice")

    def _pack(self, head: np.ndarray) -> np.ndarray:
        return ((head - self._lo) * self._radix).sum(axis=-1)

    def lookup(self, query) -> np.ndarray:
        """Row index of every query coordinate, ``-1`` where absent."""
        q = np.asarray(query)
        shape = q.shape[:-1]
        q = q.reshape(-1, q.shape[-1])
        out = np.full(q.shape[0], -1, dtype=np.int64)
        if self.n == 0 or q.shape[0] == 0:
            return out.reshape(shape)
        if not np.issubdtype(q.dtype, np.integer):
            integral = np.all(np.mod(q, 1) == 0, axis=1)
            q = np.where(integral[:, None], q, 0).astype(np.int64)
        else:
            integral = np.ones(q.shape[0], dtype=bool)
        valid = integral & (q.sum(axis=1) == 0)
        if self._packed:
            head = q[:, : self.d]
            rel = head - self._lo
            valid &= np.all((rel >= 0) & (rel < self._span), axis=1)
            keys = np.where(valid, (rel * self._radix).sum(axis=1), 0)
            pos = np.searchsorted(self._sorted, keys)
            pos = np.minimum(pos, self.n - 1)
            hit = valid & (self._sorted[pos] == keys)
            out[hit] = self._order[pos[hit]]
        else:
            for i in np.flatnonzero(valid):
                out[i] = self._dict.get(tuple(q[i].tolist()), -1)
        return out.reshape(shape)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Positions ``(m, d)`` with optional features ``(m, f)`` and labels ``(m,)``."""

    positions: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    sigma: np.ndarray | float = 1.0
    channels: tuple[str, ...] = ()

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[0] < 1:
            raise ValueError(f"positions must be a non-empty (m, d) array, got shape {pos.shape}")
        m, d = pos.shape
        _check_dim(d)
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions contain non-finite values")
        feats = self.features
        feats = np.zeros((m, 0)) if feats is None else np.asarray(feats, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        if feats.shape[0] != m:
            raise ValueError(f"features have {feats.shape[0]} rows, positions have {m}")
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != (m,):
                raise ValueError(f"labels must have shape ({m},), got {labels.shape}")
            labels = labels.astype(np.int64)
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=np.float64), (d,)).copy()
        if np.any(~(sigma > 0)):
            raise ValueError(f"sigma must be positive, got {sigma}")
        channels = tuple(self.channels)
        if channels and len(channels) != feats.shape[1]:
            raise ValueError(f"{len(channels)} channel names for {feats.shape[1]} feature columns")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "channels", channels)

    @property
    def num_points(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def scaled_positions(self) -> np.ndarray:
        return self.positions / self.sigma

    def replace(self, **changes) -> "PointCloud":
        kw = dict(
            positions=self.positions,
            features=self.features,
            labels=self.labels,
            sigma=self.sigma,
            channels=self.channels,
        )
        kw.update(changes)
        return PointCloud(**kw)


@dataclass(frozen=True, eq=False)
class SimplexAssignment:
    """Per point, the ``d+1`` enclosing vertex rows and barycentric weights.

    ``order``/``offsets`` store the inverse map J_v in CSR form: the
    ``(point, slot)`` pairs of vertex ``v`` are ``order[offsets[v]:offsets[v+1]]``
    (flat indices ``point * (d+1) + slot``), sorted by point index.
    """

    vertex_indices: np.ndarray
    weights: np.ndarray
    num_vertices: int
    order: np.ndarray = field(repr=False)
    offsets: np.ndarray = field(repr=False)

    @classmethod
    def from_indices(cls, vertex_indices, weights, num_vertices: int) -> "SimplexAssignment":
        vi = np.asarray(vertex_indices, dtype=np.int64)
        flat = vi.ravel()
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=num_vertices)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return cls(vi, np.asarray(weights, dtype=np.float64), int(num_vertices), order, offsets)

    @property
    def num_points(self) -> int:
        return self.vertex_indices.shape[0]

    def points_of(self, v: int) -> np.ndarray:
        """Indices of the points contributing to vertex ``v`` (ascending)."""
        dp1 = self.vertex_indices.shape[1]
        return self.order[self.offsets[v] : self.offsets[v + 1]] // dp1

    @cached_property
    def pair_points(self) -> np.ndarray:
        """Point index of every pair, in J_v order."""
        return self.order // self.vertex_indices.shape[1]

    @cached_property
    def pair_vertices(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_vertices), np.diff(self.offsets))


class SparseLattice:
    """Immutable set of allocated vertices at one coarsening level."""

    def __init__(self, coords, level: int = 0, values=None):
        coords = np.asarray(coords, dtype=np.int64)
        if coords.ndim != 2:
            raise ValueError(f"coords must be (n, d+1), got shape {coords.shape}")
        self.coords = coords
        self.coords.setflags(write=False)
        self.d = coords.shape[1] - 1
        self.level = int(level)
        self.table = CoordTable(coords)
        if values is None:
            values = np.zeros((len(coords), 0))
        values = np.asarray(values)
        if values.shape[0] != len(coords):
            raise ValueError(f"{values.shape[0]} value rows for {len(coords)} vertices")
        self.values = values

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def num_vertices(self) -> int:
        return self.coords.shape[0]

    @property
    def coord_index(self) -> dict[tuple[int, ...], int]:
        return {tuple(c): i for i, c in enumerate(self.coords.tolist())}

    def with_values(self, values) -> "SparseLattice":
        out = SparseLattice.__new__(SparseLattice)
        out.__dict__.update(self.__dict__)
        values = np.asarray(values)
        if values.shape[0] != len(self):
            raise ValueError(f"{values.shape[0]} value rows for {len(self)} vertices")
        out.values = values
        return out

    def index_of(self, coords) -> np.ndarray:
        return self.table.lookup(coords)

    @cached_property
    def neighbor_table(self) -> np.ndarray:
        """``(n, 2(d+1)+1)`` rows of the taps of each vertex, ``-1`` if unallocated."""
        taps = tap_offsets(self.d)
        return self.index_of(self.coords[:, None, :] + taps[None, :, :])


def _allocate(keys: np.ndarray, level: int, capacity: int) -> tuple[SparseLattice, np.ndarray]:
    m, dp1, _ = keys.shape
    flat = keys.reshape(-1, dp1)
    uniq, first, inverse = np.unique(flat, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # first-encounter order over (point, slot)
    rank = np.empty(len(uniq), dtype=np.int64)
    by_first = np.argsort(first, kind="stable")
    rank[by_first] = np.arange(len(uniq))
    if len(uniq) > capacity:
        raise LatticeCapacityError(len(uniq), capacity)
    lattice = SparseLattice(uniq[by_first], level=level)
    return lattice, rank[inverse].reshape(m, dp1)


def build_lattice(
    cloud: PointCloud, level: int = 0, capacity: int = DEFAULT_CAPACITY
) -> tuple[SparseLattice, SimplexAssignment]:
    """Allocate exactly the vertices of the simplices containing the points.

    Level ``l`` uses the scaled positions divided by ``2**l``.
    """
    pos = cloud.scaled_positions / (2.0**level)
    keys, weights = find_enclosing_simplex(elevate(pos))
    lattice, idx = _allocate(keys, level, capacity)
    return lattice, SimplexAssignment.from_indices(idx, weights, len(lattice))


def coarsen_coords(
    fine: SparseLattice, cloud: PointCloud, capacity: int = DEFAULT_CAPACITY
) -> SparseLattice:
    """Coarse lattice one level above ``fine``, allocated from the same cloud."""
    if cloud.dim != fine.d:
        raise ValueError(f"cloud dimension {cloud.dim} does not match lattice dimension {fine.d}")
    lattice, _ = build_lattice(cloud, level=fine.level + 1, capacity=capacity)
    return lattice


def fine_neighbors_of_coarse(coarse_coord) -> tuple[np.ndarray, np.ndarray]:
    """Fine-lattice center ``2c`` and its ``2(d+1)`` neighbours."""
    center = 2 * np.asarray(coarse_coord, dtype=np.int64)
    return center, center + neighbor_offsets(center.shape[0] - 1)


def coarse_neighbors_of_fine(fine_coord) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Embed a fine vertex in the coarse lattice.

    Returns ``(center, candidates, integral)`` where ``center = c/2`` (float),
    ``candidates`` holds center then the half-offset neighbours in tap order and
    ``integral`` flags the candidates without a fractional component.  Only
    integral candidates can carry a contribution.
    """
    c = np.asarray(fine_coord, dtype=np.int64)
    center = c / 2.0
    cand = center[None, :] - tap_offsets(c.shape[0] - 1) / 2.0
    integral = np.all(np.mod(cand, 1.0) == 0.0, axis=1)
    return center, cand, integral


def coarsen_table(fine: SparseLattice, coarse: SparseLattice) -> np.ndarray:
    """``(n_coarse, taps)`` fine rows gathered by each coarse vertex, ``-1`` if missing.

    Tap ``k`` of coarse vertex ``c`` reads fine vertex ``2c + offset_k``.
    """
    _check_levels(fine, coarse)
    taps = tap_offsets(fine.d)
    return fine.index_of(2 * coarse.coords[:, None, :] + taps[None, :, :])


def upsample_table(coarse: SparseLattice, fine: SparseLattice) -> np.ndarray:
    """``(n_fine, taps)`` coarse rows read by each fine vertex, ``-1`` if missing.

    Tap ``k`` of fine vertex ``f`` reads coarse vertex ``f/2 - offset_k/2`` when
    that is integral.  With this sign convention the table is the exact
    transpose of :func:`coarsen_table`: ``coarsen[c, k] == f`` iff
    ``upsample[f, k] == c``.
    """
    _check_levels(fine, coarse)
    twice = fine.coords[:, None, :] - tap_offsets(fine.d)[None, :, :]
    even = np.all(twice % 2 == 0, axis=2)
    out = coarse.index_of(twice // 2)
    out[~even] = -1
    return out


def _check_levels(fine: SparseLattice, coarse: SparseLattice) -> None:
    if coarse.level != fine.level + 1:
        raise ValueError(
            f"level mismatch: coarse lattice at level {coarse.level}, fine at {fine.level}"
        )
    if coarse.d != fine.d:
        raise ValueError(f"dimension mismatch: {coarse.d} vs {fine.d}")
