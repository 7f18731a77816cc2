import numpy as np
import pytest

from latticenet.checkpoint import (
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from latticenet.config import ConfigError, load_config, parse_config
from latticenet.io import (
    CloudFormatError,
    parse_cloud,
    parse_cloud_bytes,
    parse_ply_bytes,
    parse_xyz_text,
    read_labels,
    write_cloud,
    write_labels,
)
from latticenet.lattice import PointCloud
from latticenet.network import LatticeNet, LayerSpec

from fuzzing import fuzz


# ---------------------------------------------------------------- ascii


def test_xyz_label_line():
    cloud = parse_xyz_text("0 0 0 5\n")
    assert cloud.positions.tolist() == [[0.0, 0.0, 0.0]]
    assert cloud.labels.tolist() == [5]


def test_empty_file_is_an_error():
    with pytest.raises(CloudFormatError):
        parse_xyz_text("")
    with pytest.raises(CloudFormatError):
        parse_xyz_text("# only a comment\n\n")


def test_malformed_line_reports_line_number():
    with pytest.raises(CloudFormatError) as err:
        parse_xyz_text("0 0 0\n1 2 x\n")
    assert err.value.line == 2 and "line 2" in str(err.value)
    with pytest.raises(CloudFormatError) as err:
        parse_xyz_text("0 0 0\n1 2 3 4\n")
    assert err.value.line == 2


def test_ambiguous_column_count_needs_override():
    text = "0 0 0 255 0 0 1\n"
    with pytest.raises(CloudFormatError):
        parse_xyz_text(text)
    cloud = parse_xyz_text(text, columns="xyz,rgb,label")
    assert cloud.features.tolist() == [[1.0, 0.0, 0.0]] and cloud.labels.tolist() == [1]
    cloud = parse_xyz_text("# columns: xyz normal label\n" + text)
    assert cloud.channels == ("nx", "ny", "nz")


def test_missing_columns_reduce_feature_width():
    assert parse_xyz_text("1 2 3\n").num_features == 0
    assert parse_xyz_text("1 2 3 0 0 0 0 0 1\n").num_features == 6


def test_non_integer_label_rejected():
    with pytest.raises(CloudFormatError):
        parse_xyz_text("0 0 0 1.5\n")


def test_xyz_round_trip_is_lossless(tmp_path, rng):
    pos = rng.normal(size=(1000, 3)) * rng.uniform(1e-3, 1e3)
    labels = rng.integers(0, 20, size=1000)
    cloud = PointCloud(pos, labels=labels)
    write_cloud(tmp_path / "c.xyz", cloud)
    back = parse_cloud(tmp_path / "c.xyz")
    assert np.array_equal(back.positions, pos)
    assert np.array_equal(back.labels, labels)


def test_rgb_normal_round_trip(tmp_path, rng):
    feats = np.concatenate([rng.integers(0, 256, size=(50, 3)) / 255.0, rng.normal(size=(50, 3))], axis=1)
    cloud = PointCloud(rng.normal(size=(50, 3)), features=feats, labels=np.zeros(50), channels=("r", "g", "b", "nx", "ny", "nz"))
    write_cloud(tmp_path / "c.xyz", cloud)
    back = parse_cloud(tmp_path / "c.xyz")
    assert np.allclose(back.features, feats, atol=1e-15)
    assert back.channels == cloud.channels


# ---------------------------------------------------------------- ply


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(tmp_path, rng, binary):
    feats = np.concatenate([rng.integers(0, 256, size=(20, 3)) / 255.0, rng.normal(size=(20, 3))], axis=1)
    cloud = PointCloud(rng.normal(size=(20, 3)), features=feats, labels=rng.integers(0, 4, size=20), channels=("r", "g", "b", "nx", "ny", "nz"))
    write_cloud(tmp_path / "c.ply", cloud, binary=binary)
    back = parse_cloud(tmp_path / "c.ply")
    assert np.array_equal(back.positions, cloud.positions)
    assert np.array_equal(back.labels, cloud.labels)
    assert np.allclose(back.features, feats, atol=1e-15)


def test_ply_unknown_property_named():
    data = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty float curvature\nend_header\n0 0 0 1\n"
    with pytest.raises(CloudFormatError) as err:
        parse_ply_bytes(data)
    assert "curvature" in str(err.value)


def test_ply_big_endian_and_truncation():
    rec = np.array([(1.0, 2.0, 3.0)], dtype=[("x", ">f4"), ("y", ">f4"), ("z", ">f4")])
    head = b"ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
    assert parse_ply_bytes(head + rec.tobytes()).positions.tolist() == [[1.0, 2.0, 3.0]]
    with pytest.raises(CloudFormatError):
        parse_ply_bytes(head + rec.tobytes()[:-1])
    with pytest.raises(CloudFormatError):
        parse_ply_bytes(head.replace(b"vertex 1", b"vertex 2") + rec.tobytes())


def test_ply_rejects_faces():
    data = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n"
    with pytest.raises(CloudFormatError):
        parse_ply_bytes(data)


def test_fuzz_small_sample():
    parsed, rejected, crashes = fuzz(1500, seed=3)
    assert crashes == []
    assert parsed > 0 and rejected > 0


# ---------------------------------------------------------------- labels


def test_write_labels_single_point(tmp_path):
    cloud = PointCloud(np.array([[1.5, -2.0, 0.25]]))
    write_labels(tmp_path / "l.txt", cloud, [3])
    assert (tmp_path / "l.txt").read_text().splitlines() == ["1.5 -2 0.25 3"]


def test_labels_round_trip_in_order(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(200, 3)))
    pred = rng.integers(0, 7, size=200)
    write_labels(tmp_path / "l.txt", cloud, pred)
    assert np.array_equal(read_labels(tmp_path / "l.txt"), pred)
    back = parse_cloud(tmp_path / "l.txt", columns="xyz,label")
    assert np.array_equal(back.positions, cloud.positions)
    with pytest.raises(ValueError):
        write_labels(tmp_path / "l.txt", cloud, pred[:-1])


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_cloud(tmp_path / "none.xyz")


def test_parse_cloud_bytes_wraps_everything():
    with pytest.raises(CloudFormatError):
        parse_cloud_bytes(b"\xff\xfe\x00", "xyz")
    with pytest.raises(CloudFormatError):
        parse_cloud_bytes(b"0 0 0", "obj")


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_bitwise_round_trip(tmp_path):
    spec = LayerSpec(channels=(8, 16), groups=4)
    model = LatticeNet.create(spec, seed=3)
    save_checkpoint(tmp_path / "m.ckpt", model.state_dict(), spec.to_dict(), {"sigma": [0.1] * 3})
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck.spec == spec.to_dict() and ck.meta == {"sigma": [0.1] * 3}
    for k, v in model.state_dict().items():
        assert ck.state[k].dtype == np.float32
        assert ck.state[k].tobytes() == v.astype(np.float32).tobytes()
    restored = LatticeNet.create(LayerSpec.from_dict(ck.spec))
    restored.load_state_dict(ck.state)


def test_empty_checkpoint():
    data = encode_checkpoint({})
    assert decode_checkpoint(data).state == {}


def test_checkpoint_payload_length(rng):
    state = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(5,))}
    data = encode_checkpoint(state)
    rest = data[len(b"LATTICENET-CHECKPOINT 1\n"):]
    size_line, _, rest = rest.partition(b"\n")
    assert len(rest) - int(size_line) == (12 + 5) * 4


def test_truncated_checkpoint_errors(rng):
    data = encode_checkpoint({"w": rng.normal(size=(10, 10))})
    for cut in (1, 4, 100, len(data) // 2):
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[:-cut])
    with pytest.raises(CheckpointError):
        decode_checkpoint(data + b"\x00")
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"not a checkpoint")


def test_checkpoint_rejects_non_finite():
    with pytest.raises((CheckpointError, ValueError)):
        encode_checkpoint({"w": np.array([np.nan])})


# ---------------------------------------------------------------- config


def test_config_parsing(tmp_path):
    (tmp_path / "data" / "train").mkdir(parents=True)
    (tmp_path / "data" / "train" / "a.xyz").write_text("0 0 0 1\n")
    (tmp_path / "c.yaml").write_text(
        "seed: 3\nsigma: [0.1, 0.2, 0.3]\ndata: data\nmodel:\n  channels: [8, 16]\ntraining:\n  epochs: 4\n  lr: 0.01\n"
    )
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.sigma == [0.1, 0.2, 0.3] and cfg.seed == 3
    assert cfg.training.epochs == 4 and cfg.training.seed == 3
    assert cfg.train_files() == [tmp_path / "data" / "train" / "a.xyz"]
    assert cfg.val_files() == []
    assert cfg.model == {"channels": [8, 16]}


def test_config_errors():
    with pytest.raises(ConfigError):
        parse_config({"data": "x", "bogus": 1})
    with pytest.raises(ConfigError):
        parse_config({"data": "x", "sigma": -1})
    with pytest.raises(ConfigError):
        parse_config({"sigma": 0.1})
    with pytest.raises(ConfigError):
        parse_config({"data": "x", "training": {"epoch": 3}})
    with pytest.raises(ConfigError):
        parse_config(["not", "a", "mapping"])
