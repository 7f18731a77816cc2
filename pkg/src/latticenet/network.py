"""LatticeNet: a U-Net over a sparse permutohedral lattice hierarchy."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from . import ops
from .autodiff import (
    Tensor,
    add,
    concat_cols,
    group_norm,
    matmul,
    relu,
    scale,
    softmax_cross_entropy,
)
from .lattice import PointCloud, SimplexAssignment, SparseLattice, build_lattice, num_taps

SLICE_MODES = ("slice", "deform")
DISTRIBUTE_MODES = ("distribute", "splat", "no-local-avg", "no-elevate")


@dataclass
class LayerSpec:
    """Architecture of a LatticeNet model.

    ``channels[l]`` is the width at lattice level ``l``; level ``l`` is built
    from the scaled positions divided by ``2**l``.
    """

    num_classes: int = 2
    dim: int = 3
    in_features: int = 0
    channels: tuple[int, ...] = (64, 128, 256)
    encoder_blocks: int = 2
    decoder_blocks: int = 1
    pointnet_hidden: tuple[int, ...] = (16, 32)
    pointnet_width: int = 64
    groups: int = 32
    slice_mode: str = "deform"
    distribute_mode: str = "distribute"
    deform_nonlinearity: str = "tanh"
    deform_include_self: bool = False
    regularizer_weight: float = 0.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.pointnet_hidden = tuple(int(c) for c in self.pointnet_hidden)
        if not self.channels:
            raise ValueError("channels must list at least one level width")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.groups < 1:
            raise ValueError(f"groups must be positive, got {self.groups}")
        for c in self.channels:
            g = self.groups_for(c)
            if c % g:
                raise ValueError(f"level width {c} is not divisible by its group count {g}")
            if (2 * c) % self.groups_for(2 * c):
                raise ValueError(f"skip width {2 * c} is not divisible by its group count")
        if self.slice_mode not in SLICE_MODES:
            raise ValueError(f"slice_mode must be one of {SLICE_MODES}, got {self.slice_mode!r}")
        if self.distribute_mode not in DISTRIBUTE_MODES:
            raise ValueError(
                f"distribute_mode must be one of {DISTRIBUTE_MODES}, got {self.distribute_mode!r}"
            )
        if self.deform_nonlinearity not in ops.NONLINEARITIES:
            raise ValueError(f"deform_nonlinearity must be one of {ops.NONLINEARITIES}")
        if self.regularizer_weight < 0:
            raise ValueError("regularizer_weight must be >= 0")
        if self.encoder_blocks < 0 or self.decoder_blocks < 0:
            raise ValueError("block counts must be >= 0")

    def groups_for(self, channels: int) -> int:
        return min(self.groups, channels)

    @property
    def num_levels(self) -> int:
        return len(self.channels)

    @property
    def embed_width(self) -> int:
        if self.distribute_mode in ("distribute", "no-local-avg"):
            return self.pointnet_width
        return self.dim + self.in_features

    def to_dict(self) -> dict:
        out = asdict(self)
        out["channels"] = list(self.channels)
        out["pointnet_hidden"] = list(self.pointnet_hidden)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "LayerSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown LayerSpec keys: {sorted(unknown)}")
        return cls(**data)


class Hierarchy:
    """The lattices of every level for one cloud plus the level-to-level tables."""

    def __init__(self, cloud: PointCloud, num_levels: int):
        base, assignment = build_lattice(cloud, level=0)
        self.assignment: SimplexAssignment = assignment
        self.lattices: list[SparseLattice] = [base]
        for level in range(1, num_levels):
            coarse, _ = build_lattice(cloud, level=level)
            self.lattices.append(coarse)
        self.pairs = [
            ops.LevelPair(self.lattices[l], self.lattices[l + 1]) for l in range(num_levels - 1)
        ]


class ForwardResult(NamedTuple):
    logits: Tensor
    offsets: Tensor | None


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(spec: LayerSpec, seed: int | np.random.Generator = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Fan-in uniform initialisation; the second conv of every residual branch starts at zero."""
    rng = np.random.default_rng(seed)
    K = num_taps(spec.dim)
    params: dict[str, np.ndarray] = {}

    def linear(name, cin, cout):
        params[f"{name}.weight"] = _uniform(rng, (cin, cout), cin, dtype)
        params[f"{name}.bias"] = _uniform(rng, (cout,), cin, dtype)

    def conv(name, cin, cout, zero=False):
        if zero:
            params[f"{name}.weight"] = np.zeros((K, cin, cout), dtype=dtype)
            params[f"{name}.bias"] = np.zeros((cout,), dtype=dtype)
        else:
            params[f"{name}.weight"] = _uniform(rng, (K, cin, cout), K * cin, dtype)
            params[f"{name}.bias"] = _uniform(rng, (cout,), K * cin, dtype)

    def norm(name, c):
        params[f"{name}.weight"] = np.ones((c,), dtype=dtype)
        params[f"{name}.bias"] = np.zeros((c,), dtype=dtype)

    def block(name, c):
        norm(f"{name}.gn1", c)
        conv(f"{name}.conv1", c, c)
        norm(f"{name}.gn2", c)
        conv(f"{name}.conv2", c, c, zero=True)

    if spec.distribute_mode in ("distribute", "no-local-avg"):
        widths = [spec.dim + spec.in_features, *spec.pointnet_hidden, spec.pointnet_width]
        for i in range(len(widths) - 1):
            linear(f"pointnet.{i}", widths[i], widths[i + 1])
    conv("stem", spec.embed_width, spec.channels[0])
    L = spec.num_levels
    for l, c in enumerate(spec.channels):
        for j in range(spec.encoder_blocks):
            block(f"enc{l}.block{j}", c)
        if l < L - 1:
            norm(f"down{l}.gn", c)
            conv(f"down{l}.conv", c, spec.channels[l + 1])
    for l in reversed(range(L - 1)):
        c = spec.channels[l]
        norm(f"up{l}.gn", spec.channels[l + 1])
        conv(f"up{l}.conv", spec.channels[l + 1], c)
        norm(f"dec{l}.reduce_gn", 2 * c)
        linear(f"dec{l}.reduce", 2 * c, c)
        for j in range(spec.decoder_blocks):
            block(f"dec{l}.block{j}", c)
    c0 = spec.channels[0]
    norm("head.gn", c0)
    if spec.slice_mode == "deform":
        params["deform.weight"] = _uniform(rng, (c0, 1), c0, dtype)
        params["deform.bias"] = np.zeros((1,), dtype=dtype)
    linear("classifier", c0, spec.num_classes)
    return {name: Tensor(v, requires_grad=True, name=name, dtype=dtype) for name, v in params.items()}


def param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(spec, 0, np.float32).items()}


def _preact(x: Tensor, params, name: str, groups: int) -> Tensor:
    return relu(group_norm(x, groups, params[f"{name}.weight"], params[f"{name}.bias"]))


def resnet_block(x: Tensor, lattice: SparseLattice, params, name: str, groups: int) -> Tensor:
    """Pre-activated residual block: ``x + conv(relu(gn(conv(relu(gn(x))))))``."""
    h = _preact(x, params, f"{name}.gn1", groups)
    h = ops.convolve(h, lattice, params[f"{name}.conv1.weight"], params[f"{name}.conv1.bias"])
    h = _preact(h, params, f"{name}.gn2", groups)
    h = ops.convolve(h, lattice, params[f"{name}.conv2.weight"], params[f"{name}.conv2.bias"])
    return add(x, h)


def embed_points(cloud: PointCloud, hierarchy: Hierarchy, params, spec: LayerSpec, dtype) -> Tensor:
    """Vertex values of the finest lattice from the raw points."""
    asg = hierarchy.assignment
    mode = spec.distribute_mode
    if mode == "splat":
        raw = np.concatenate([cloud.scaled_positions, cloud.features], axis=1).astype(dtype)
        return ops.splat(Tensor(raw), asg)
    buffers = ops.distribute(cloud, asg, local_average=(mode != "no-local-avg"))
    rows = ops.distributed_rows(buffers, dtype=dtype)
    layers = []
    if mode != "no-elevate":
        n = len(spec.pointnet_hidden) + 1
        layers = [(params[f"pointnet.{i}.weight"], params[f"pointnet.{i}.bias"]) for i in range(n)]
    return ops.vertex_pointnet(rows, buffers.offsets, layers)


def forward(cloud: PointCloud, params, spec: LayerSpec, hierarchy: Hierarchy | None = None) -> ForwardResult:
    """Per-point logits and (in deform mode) the barycentric offsets."""
    if cloud.dim != spec.dim:
        raise ValueError(f"cloud has dimension {cloud.dim}, model expects {spec.dim}")
    if cloud.num_features != spec.in_features:
        raise ValueError(f"cloud has {cloud.num_features} feature columns, model expects {spec.in_features}")
    if hierarchy is None:
        hierarchy = Hierarchy(cloud, spec.num_levels)
    dtype = params["classifier.weight"].dtype
    lat = hierarchy.lattices
    L = spec.num_levels
    g = spec.groups_for

    x = embed_points(cloud, hierarchy, params, spec, dtype)
    x = ops.convolve(x, lat[0], params["stem.weight"], params["stem.bias"])
    skips = []
    for l in range(L):
        c = spec.channels[l]
        for j in range(spec.encoder_blocks):
            x = resnet_block(x, lat[l], params, f"enc{l}.block{j}", g(c))
        if l < L - 1:
            skips.append(x)
            h = _preact(x, params, f"down{l}.gn", g(c))
            x = ops.coarsen_conv(h, hierarchy.pairs[l], params[f"down{l}.conv.weight"], params[f"down{l}.conv.bias"])
    for l in reversed(range(L - 1)):
        c = spec.channels[l]
        h = _preact(x, params, f"up{l}.gn", g(spec.channels[l + 1]))
        x = ops.upsample_conv(h, hierarchy.pairs[l], params[f"up{l}.conv.weight"], params[f"up{l}.conv.bias"])
        x = concat_cols([x, skips[l]])
        h = _preact(x, params, f"dec{l}.reduce_gn", g(2 * c))
        x = add(matmul(h, params[f"dec{l}.reduce.weight"]), params[f"dec{l}.reduce.bias"])
        for j in range(spec.decoder_blocks):
            x = resnet_block(x, lat[l], params, f"dec{l}.block{j}", g(c))
    x = _preact(x, params, "head.gn", g(spec.channels[0]))

    offsets = None
    if spec.slice_mode == "deform":
        feats, offsets = ops.deform_slice(
            x,
            hierarchy.assignment,
            params["deform.weight"],
            params["deform.bias"],
            nonlinearity=spec.deform_nonlinearity,
            include_self=spec.deform_include_self,
        )
    else:
        feats = ops.slice_values(x, hierarchy.assignment)
    logits = add(matmul(feats, params["classifier.weight"]), params["classifier.bias"])
    return ForwardResult(logits, offsets)


def loss(logits: Tensor, labels, offsets: Tensor | None = None, regularizer_weight: float = 0.0, ignore_index: int = -1) -> Tensor:
    """Mean cross-entropy plus the weighted offset-sum regulariser."""
    out = softmax_cross_entropy(logits, labels, ignore_index=ignore_index)
    if regularizer_weight > 0 and offsets is not None:
        reg = ops.deform_regularizer(offsets)
        out = add(out, scale(reg, regularizer_weight))
    return out


@dataclass
class LatticeNet:
    """A model: architecture plus named parameter tensors."""

    spec: LayerSpec
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, spec: LayerSpec, seed: int = 0, dtype=np.float32) -> "LatticeNet":
        return cls(spec, init_params(spec, seed, dtype))

    def forward(self, cloud: PointCloud, hierarchy: Hierarchy | None = None) -> ForwardResult:
        return forward(cloud, self.params, self.spec, hierarchy)

    def predict(self, cloud: PointCloud) -> np.ndarray:
        return np.argmax(self.forward(cloud).logits.data, axis=1)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = param_shapes(self.spec)
        problems = []
        for name in sorted(set(expected) | set(state)):
            if name not in state:
                problems.append(f"missing {name} {expected[name]}")
            elif name not in expected:
                problems.append(f"unexpected {name} {tuple(np.shape(state[name]))}")
            elif tuple(np.shape(state[name])) != tuple(expected[name]):
                problems.append(f"{name}: expected {expected[name]}, got {tuple(np.shape(state[name]))}")
        if problems:
            raise ValueError("parameter mismatch: " + "; ".join(problems))
        dtype = next(iter(self.params.values())).dtype if self.params else np.float32
        self.params = {
            k: Tensor(np.array(state[k], dtype=dtype), requires_grad=True, name=k, dtype=dtype)
            for k in expected
        }
