import numpy as np
import pytest

from latticenet import ops
from latticenet.autodiff import Tape, Tensor, total
from latticenet.gradcheck import numerical_gradient, relative_error
from latticenet.lattice import PointCloud, build_lattice, elevation_matrix
from latticenet.network import (
    Hierarchy,
    LatticeNet,
    LayerSpec,
    embed_points,
    forward,
    init_params,
    loss,
    param_shapes,
    resnet_block,
)

from conftest import random_cloud

TINY = dict(channels=(4, 8), groups=2, pointnet_hidden=(4,), pointnet_width=4, encoder_blocks=1, decoder_blocks=1)


def tiny(**kw):
    return LayerSpec(**{**TINY, **kw})


def test_single_simplex_cloud_forward():
    cloud = PointCloud(np.array([[0.1, 0.2, 0.3]]))
    model = LatticeNet.create(LayerSpec(num_classes=3))
    res = model.forward(cloud)
    assert res.logits.shape == (1, 3) and np.all(np.isfinite(res.logits.data))
    assert res.offsets.shape == (1, 4)


def test_default_spec_has_three_levels():
    spec = LayerSpec()
    assert spec.num_levels == 3 and spec.embed_width == 64
    assert LayerSpec(distribute_mode="splat", in_features=2).embed_width == 5


def test_deform_with_zero_weight_equals_plain_slice(rng):
    cloud = random_cloud(rng, m=80, features=1, extent=3.0)
    plain = init_params(tiny(in_features=1, slice_mode="slice"), seed=3, dtype=np.float64)
    deform = dict(plain)
    deform["deform.weight"] = Tensor(np.zeros((4, 1)))
    deform["deform.bias"] = Tensor(np.zeros(1))
    a = forward(cloud, plain, tiny(in_features=1, slice_mode="slice")).logits.data
    b = forward(cloud, deform, tiny(in_features=1, slice_mode="deform")).logits.data
    assert np.array_equal(a, b)


def test_full_model_gradient_spot_check(rng):
    spec = tiny(in_features=2, regularizer_weight=0.1)
    cloud = random_cloud(rng, m=40, features=2, extent=2.0, labels=rng.integers(0, 2, size=40))
    params = init_params(spec, seed=1, dtype=np.float64)
    for p in params.values():  # move off the zero init so every branch is live
        p.data = p.data + rng.normal(scale=0.1, size=p.shape)
    h = Hierarchy(cloud, spec.num_levels)

    def value():
        res = forward(cloud, params, spec, h)
        return loss(res.logits, cloud.labels, res.offsets, spec.regularizer_weight)

    with Tape() as tape:
        out = value()
    tape.backward(out)
    names = rng.choice(sorted(params), size=5, replace=False)
    for name in names:
        t = params[name]
        entries = rng.choice(t.data.size, size=min(4, t.data.size), replace=False)
        num = numerical_gradient(value, t, entries)
        assert relative_error(t.grad.ravel()[entries], num) < 1e-3, name


def test_zero_residual_branch_is_identity(rng):
    cloud = random_cloud(rng, m=30)
    lat, _ = build_lattice(cloud)
    spec = tiny()
    params = init_params(spec, seed=0, dtype=np.float64)
    x = Tensor(rng.normal(size=(len(lat), 4)))
    y = resnet_block(x, lat, params, "enc0.block0", 2)
    assert np.array_equal(y.data, x.data)
    for _ in range(3):
        y = resnet_block(y, lat, params, "enc0.block0", 2)
    assert y.shape == x.shape


def test_resnet_block_skip_gradient(rng):
    cloud = random_cloud(rng, m=20)
    lat, _ = build_lattice(cloud)
    params = init_params(tiny(), seed=0, dtype=np.float64)
    params["enc0.block0.conv2.weight"].data = rng.normal(scale=0.1, size=params["enc0.block0.conv2.weight"].shape)
    x = Tensor(rng.normal(size=(len(lat), 4)), requires_grad=True)
    with Tape() as tape:
        out = total(resnet_block(x, lat, params, "enc0.block0", 2))
    tape.backward(out)
    num = numerical_gradient(lambda: total(resnet_block(x, lat, params, "enc0.block0", 2)), x, np.arange(x.data.size))
    assert relative_error(x.grad.ravel(), num) < 1e-6
    # with the branch silenced only the identity path remains
    params["enc0.block0.conv2.weight"].data[:] = 0
    x.grad = None
    with Tape() as tape:
        out = total(resnet_block(x, lat, params, "enc0.block0", 2))
    tape.backward(out)
    assert np.array_equal(x.grad, np.ones(x.shape))


def test_loss_ignores_offsets_when_weight_zero(rng):
    logits = Tensor(rng.normal(size=(5, 2)))
    labels = rng.integers(0, 2, size=5)
    a = loss(logits, labels, Tensor(rng.normal(size=(5, 4))), 0.0).item()
    b = loss(logits, labels, Tensor(rng.normal(size=(5, 4))), 0.0).item()
    assert a == b
    c = loss(logits, labels, Tensor(np.ones((5, 4))), 0.5).item()
    assert np.isclose(c - a, 0.5 * 16.0)


def test_splat_mode_embedding_is_plain_barycentric_sum(rng):
    spec = tiny(distribute_mode="splat", in_features=2)
    cloud = random_cloud(rng, m=25, features=2, sigma=0.7)
    h = Hierarchy(cloud, 2)
    got = embed_points(cloud, h, init_params(spec), spec, np.float64).data
    asg = h.assignment
    want = np.zeros((asg.num_vertices, 5))
    raw = np.concatenate([cloud.positions / 0.7, cloud.features], axis=1)
    for p in range(cloud.num_points):
        for k in range(4):
            want[asg.vertex_indices[p, k]] += asg.weights[p, k] * raw[p]
    assert np.allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("mode", ["distribute", "splat", "no-local-avg", "no-elevate"])
@pytest.mark.parametrize("slice_mode", ["slice", "deform"])
def test_ablation_variants_run(mode, slice_mode, rng):
    spec = tiny(distribute_mode=mode, slice_mode=slice_mode, in_features=1)
    cloud = random_cloud(rng, m=50, features=1)
    model = LatticeNet.create(spec, seed=0)
    res = model.forward(cloud)
    assert res.logits.shape == (50, 2) and np.all(np.isfinite(res.logits.data))
    assert (res.offsets is None) == (slice_mode == "slice")


def test_point_order_does_not_matter(rng):
    spec = tiny(in_features=1)
    cloud = random_cloud(rng, m=60, features=1, extent=2.0)
    params = init_params(spec, seed=4, dtype=np.float64)
    perm = rng.permutation(60)
    shuffled = cloud.replace(positions=cloud.positions[perm], features=cloud.features[perm])
    a = forward(cloud, params, spec).logits.data
    b = forward(shuffled, params, spec).logits.data
    assert np.allclose(a[perm], b, atol=1e-10)


def test_translation_by_coarse_lattice_vector(rng):
    spec = tiny(channels=(4, 8, 8))
    sigma = 0.5
    cloud = random_cloud(rng, m=60, features=0, extent=1.5, sigma=sigma)
    # shift whose elevation at the coarsest level is a lattice neighbour offset
    v = np.array([3.0, -1.0, -1.0, -1.0])
    t = 4 * sigma * np.linalg.lstsq(elevation_matrix(3), v, rcond=None)[0]
    moved = cloud.replace(positions=cloud.positions + t)
    params = init_params(spec, seed=2, dtype=np.float64)
    a = forward(cloud, params, spec).logits.data
    b = forward(moved, params, spec).logits.data
    assert np.allclose(a, b, atol=1e-8)


def test_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        LayerSpec(slice_mode="bogus")
    with pytest.raises(ValueError):
        LayerSpec(num_classes=1)
    with pytest.raises(ValueError):
        LayerSpec(channels=(6,), groups=4)
    with pytest.raises(ValueError):
        LayerSpec.from_dict({"width": 3})
    spec = tiny(num_classes=5)
    assert LayerSpec.from_dict(spec.to_dict()) == spec


def test_load_state_dict_reports_mismatches():
    model = LatticeNet.create(tiny())
    state = dict(model.state_dict())
    state["classifier.weight"] = np.zeros((3, 3))
    del state["stem.bias"]
    state["extra"] = np.zeros(1)
    with pytest.raises(ValueError) as err:
        model.load_state_dict(state)
    msg = str(err.value)
    assert "classifier.weight" in msg and "stem.bias" in msg and "extra" in msg


def test_param_shapes_match_init():
    spec = LayerSpec()
    params = init_params(spec)
    assert {k: v.shape for k, v in params.items()} == param_shapes(spec)
    assert params["stem.weight"].shape == (9, 64, 64)


def test_feature_count_checked(rng):
    model = LatticeNet.create(tiny(in_features=2))
    with pytest.raises(ValueError):
        model.forward(random_cloud(rng, features=1))


def test_distribute_mode_uses_pointnet(rng):
    spec = tiny()
    cloud = random_cloud(rng, m=30, features=0)
    h = Hierarchy(cloud, 2)
    params = init_params(spec, dtype=np.float64)
    got = embed_points(cloud, h, params, spec, np.float64).data
    buf = ops.distribute(cloud, h.assignment)
    w0, b0 = params["pointnet.0.weight"].data, params["pointnet.0.bias"].data
    w1, b1 = params["pointnet.1.weight"].data, params["pointnet.1.bias"].data
    for v in range(buf.num_vertices):
        rows = np.maximum(buf.coords_of(v) @ w0 + b0, 0) @ w1 + b1
        assert np.allclose(got[v], rows.max(axis=0), atol=1e-12)
