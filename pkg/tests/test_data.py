import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmcut.core import ConfigError, InvalidInputError, PointCloud, rng_stream
from pmcut.data import (FAMILIES, PARTS_PER_FAMILY, BadMagicError, PCBFormatError, ShapeSpec,
                        TruncatedError, VersionMismatchError, build_dataset, gen_shape, read_dataset,
                        read_pcb, read_pct, write_dataset, write_pcb, write_pct)


def test_sphere_on_unit_surface():
    cloud = gen_shape(ShapeSpec("sphere", 500, size_jitter=0.0), rng_stream(0), normalize=False)
    assert np.abs(np.linalg.norm(cloud.points, axis=1) - 1).max() <= 1e-9


def test_cylinder_caps_at_half_height():
    cloud = gen_shape(ShapeSpec("cylinder", 800, size_jitter=0.0), rng_stream(1), normalize=False)
    caps = cloud.point_labels == 1
    assert caps.any() and (~caps).any()
    assert np.abs(np.abs(cloud.points[caps, 2]) - 0.8).max() <= 1e-9
    side_r = np.linalg.norm(cloud.points[~caps, :2], axis=1)
    assert np.abs(side_r - 0.6).max() <= 1e-9


def test_hemisphere_frequency():
    cloud = gen_shape(ShapeSpec("sphere", 10_000), rng_stream(2), normalize=False)
    assert abs(cloud.point_labels.mean() - 0.5) <= 0.02


def test_cube_parts_follow_face_axis():
    cloud = gen_shape(ShapeSpec("cube", 600, size_jitter=0.0), rng_stream(3), normalize=False)
    for axis in range(3):
        sel = cloud.point_labels == axis
        assert np.allclose(np.abs(cloud.points[sel, axis]), 1.0)


def test_torus_inner_ring():
    cloud = gen_shape(ShapeSpec("torus", 2000, size_jitter=0.0), rng_stream(4), normalize=False)
    r = np.linalg.norm(cloud.points[:, :2], axis=1)
    assert np.all(r[cloud.point_labels == 1] <= 1.0 + 1e-12)
    assert np.all(r[cloud.point_labels == 0] >= 1.0 - 1e-12)


@pytest.mark.parametrize("family", FAMILIES)
def test_normalized_shapes(family):
    cloud = gen_shape(ShapeSpec(family, 128, rotation_jitter=45), rng_stream(5, family))
    assert abs(np.linalg.norm(cloud.points, axis=1).max() - 1) <= 1e-12
    assert np.linalg.norm(cloud.points.mean(axis=0)) <= 1e-12
    assert cloud.class_label == FAMILIES.index(family)
    assert set(np.unique(cloud.point_labels)) <= set(range(PARTS_PER_FAMILY[family]))


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        ShapeSpec("cone")
    with pytest.raises(InvalidInputError):
        ShapeSpec("sphere", n_points=4)
    with pytest.raises(InvalidInputError):
        ShapeSpec("sphere", rotation_jitter=float("inf"))


def test_split_counts():
    ds = build_dataset(per_class=250, n_points=8, seed=0)
    assert len(ds.train_idx) == 800 and len(ds.test_idx) == 200
    train_lab = np.array([ds.clouds[i].class_label for i in ds.train_idx])
    test_lab = np.array([ds.clouds[i].class_label for i in ds.test_idx])
    assert np.bincount(train_lab).tolist() == [200] * 4
    assert np.bincount(test_lab).tolist() == [50] * 4
    assert not set(ds.train_idx) & set(ds.test_idx)
    assert sorted(set(ds.train_idx) | set(ds.test_idx)) == list(range(1000))


def test_dataset_deterministic():
    a = build_dataset(per_class=5, n_points=16, seed=7)
    b = build_dataset(per_class=5, n_points=16, seed=7)
    c = build_dataset(per_class=5, n_points=16, seed=8)
    assert all(np.array_equal(x.points, y.points) for x, y in zip(a.clouds, b.clouds))
    assert np.array_equal(a.train_idx, b.train_idx)
    assert not np.array_equal(a.clouds[0].points, c.clouds[0].points)


def test_global_part_ids():
    ds = build_dataset(("cylinder", "cube"), per_class=3, n_points=64, seed=0)
    assert ds.parts_by_class == {0: [0, 1], 1: [2, 3, 4]}
    assert ds.num_part_classes == 5
    for c in ds.clouds:
        assert set(np.unique(c.point_labels)) <= set(ds.parts_by_class[c.class_label])


def test_build_dataset_config_errors():
    with pytest.raises(ConfigError):
        build_dataset(per_class=4, split_fraction=1.0)
    with pytest.raises(ConfigError):
        build_dataset(per_class=1)
    with pytest.raises(ConfigError):
        build_dataset(("sphere", "pyramid"), per_class=4)


# -- PCB1 -----------------------------------------------------------------------------

def test_pcb_roundtrip(tmp_path):
    ds = build_dataset(per_class=4, n_points=32, seed=1)
    write_pcb(tmp_path / "a.pcb", ds.clouds, ds.num_classes, ds.num_part_classes)
    clouds, c1, c2 = read_pcb(tmp_path / "a.pcb")
    assert (c1, c2) == (4, 9)
    for a, b in zip(ds.clouds, clouds):
        assert np.array_equal(a.points, b.points)
        assert a.class_label == b.class_label
        assert np.array_equal(a.point_labels, b.point_labels)


def test_pcb_absent_labels(tmp_path):
    cloud = PointCloud(rng_stream(0).normal(size=(8, 3)))
    write_pcb(tmp_path / "u.pcb", [cloud], 0, 0)
    (back,), _, _ = read_pcb(tmp_path / "u.pcb")
    assert back.class_label is None and back.point_labels is None


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 12), st.integers(0, 2**31))
def test_pcb_roundtrip_property(tmp_path_factory, b, n, seed):
    rng = rng_stream(seed)
    clouds = [PointCloud(rng.normal(size=(n, 3)) * 1e3, int(rng.integers(0, 7)), rng.integers(0, 9, n))
              for _ in range(b)]
    path = tmp_path_factory.mktemp("pcb") / "p.pcb"
    write_pcb(path, clouds, 7, 9)
    back, _, _ = read_pcb(path)
    assert all(np.array_equal(x.points, y.points) for x, y in zip(clouds, back))


def test_pcb_errors(tmp_path):
    ds = build_dataset(("sphere", "cube"), per_class=3, n_points=16, seed=2)
    path = tmp_path / "d.pcb"
    write_pcb(path, ds.clouds, 2, 5)
    raw = path.read_bytes()
    (tmp_path / "m.pcb").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        read_pcb(tmp_path / "m.pcb")
    half = raw[:len(raw) // 2]
    (tmp_path / "t.pcb").write_bytes(half)
    with pytest.raises(TruncatedError, match=f"expected {len(raw)} bytes, got {len(half)}"):
        read_pcb(tmp_path / "t.pcb")
    (tmp_path / "v.pcb").write_bytes(raw[:4] + (9).to_bytes(2, "little") + raw[6:])
    with pytest.raises(VersionMismatchError):
        read_pcb(tmp_path / "v.pcb")
    for err in (BadMagicError, TruncatedError, VersionMismatchError):
        assert issubclass(err, PCBFormatError)
    assert len({BadMagicError, TruncatedError, VersionMismatchError}) == 3


def test_dataset_directory_roundtrip(tmp_path):
    ds = build_dataset(("torus", "cube"), per_class=4, n_points=16, seed=3)
    write_dataset(tmp_path / "ds", ds)
    back = read_dataset(tmp_path / "ds")
    assert back.parts_by_class == ds.parts_by_class
    assert back.num_classes == 2 and back.num_part_classes == 5
    for a, b in zip(ds.train_clouds(), back.train_clouds()):
        assert np.array_equal(a.points, b.points)
    assert len(back.test_clouds()) == len(ds.test_clouds())


# -- text format -------------------------------------------------------------------------

def test_pct_roundtrip(tmp_path):
    cloud = gen_shape(ShapeSpec("cube", 40), rng_stream(6))
    write_pct(tmp_path / "c.pct", cloud, {"lambda": 0.5})
    back = read_pct(tmp_path / "c.pct")
    assert np.array_equal(back.points, cloud.points)
    assert back.class_label == cloud.class_label
    assert np.array_equal(back.point_labels, cloud.point_labels)


def test_pct_malformed(tmp_path):
    (tmp_path / "bad.pct").write_text("1 2\n")
    with pytest.raises(PCBFormatError):
        read_pct(tmp_path / "bad.pct")
